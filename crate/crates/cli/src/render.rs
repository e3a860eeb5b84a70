//! Class palette and map images.

use image::{Rgb, RgbImage};

/// Class names and colors, indexed by class id.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("Background", [230, 230, 230]),
    ("Dermis", [31, 119, 180]),
    ("Epidermis", [255, 127, 14]),
    ("Inflamm/Necrosis", [44, 160, 44]),
    ("Subcutis", [148, 103, 189]),
    ("Tumor", [214, 39, 40]),
];

/// Colors for class ids past the named entries.
const EXTRA: [[u8; 3]; 6] =
    [[140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207], [0, 0, 0]];

pub const MAX_CLASSES: usize = PALETTE.len() + EXTRA.len();

pub fn color(class: u8) -> [u8; 3] {
    let c = usize::from(class);
    if c < PALETTE.len() {
        PALETTE[c].1
    } else {
        EXTRA[(c - PALETTE.len()) % EXTRA.len()]
    }
}

pub fn class_name(class: u8) -> String {
    PALETTE.get(usize::from(class)).map_or_else(|| format!("class {class}"), |p| p.0.to_string())
}

/// Inverse of [`color`] for the first `classes` ids.
pub fn class_of(rgb: [u8; 3], classes: u8) -> Option<u8> {
    (0..classes).find(|&c| color(c) == rgb)
}

/// Renders a row-major class map of `width x height` cells.
pub fn paint(labels: &[u8], width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| Rgb(color(labels[(y * width + x) as usize])))
}

pub fn legend(classes: u8) -> String {
    let mut s = String::from("class\tname\tcolor\n");
    for c in 0..classes {
        let [r, g, b] = color(c);
        s.push_str(&format!("{c}\t{}\t#{r:02x}{g:02x}{b:02x}\n", class_name(c)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_colors_are_distinct_and_invertible() {
        let k = MAX_CLASSES as u8;
        for c in 0..k {
            assert_eq!(class_of(color(c), k), Some(c));
        }
    }

    #[test]
    fn paint_round_trips() {
        let labels = vec![0, 1, 2, 3, 4, 5];
        let img = paint(&labels, 3, 2);
        let back: Vec<u8> = img.pixels().map(|p| class_of(p.0, 6).unwrap()).collect();
        assert_eq!(back, labels);
    }
}
