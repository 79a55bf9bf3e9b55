//! Bar plots rendered straight to PNG, with a built-in 3×5 pixel font for labels.

use std::path::Path;

use crate::error::Result;
use crate::image::Image;

/// One bar: label, mean, spread (drawn as a whisker) and an optional note.
#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub spread: f64,
    pub note: Option<String>,
}

/// Rows of five 3-bit patterns, most significant bit leftmost.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '.' => [0, 0, 0, 0, 0b010],
        ',' => [0, 0, 0, 0b010, 0b100],
        ':' => [0, 0b010, 0, 0b010, 0],
        '+' => [0, 0b010, 0b111, 0b010, 0],
        '-' => [0, 0, 0b111, 0, 0],
        '_' => [0, 0, 0, 0, 0b111],
        '=' => [0, 0b111, 0, 0b111, 0],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        '(' => [0b010, 0b100, 0b100, 0b100, 0b010],
        ')' => [0b010, 0b001, 0b001, 0b001, 0b010],
        '<' => [0b001, 0b010, 0b100, 0b010, 0b001],
        '>' => [0b100, 0b010, 0b001, 0b010, 0b100],
        _ => [0; 5],
    }
}

const SCALE: usize = 2;
const CHAR_W: usize = 4 * SCALE;

fn draw_text(img: &mut Image, text: &str, x0: usize, y0: usize, level: f32) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let (x, y) = (x0 + i * CHAR_W + col * SCALE + dx, y0 + r * SCALE + dy);
                        if x < img.width && y < img.height {
                            img.set_all(y, x, level);
                        }
                    }
                }
            }
        }
    }
}

fn fill(img: &mut Image, x0: usize, x1: usize, y0: usize, y1: usize, level: f32) {
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            img.set_all(y, x, level);
        }
    }
}

/// Horizontal bar chart of values in `[0, 1]`, one bar per row, with the
/// value printed after each bar and the note (if any) below the label.
pub fn bar_chart(title: &str, bars: &[Bar]) -> Image {
    let label_w = bars.iter().map(|b| b.label.len()).max().unwrap_or(0).max(4) * CHAR_W + 8;
    let plot_w = 300;
    let value_w = 16 * CHAR_W;
    let row_h = 34;
    let width = label_w + plot_w + value_w;
    let height = 30 + bars.len() * row_h + 10;
    let mut img = Image::filled(1, height, width, 1.0);
    draw_text(&mut img, title, 4, 6, 0.0);
    // Axis line at zero, drawn first so bars cover it.
    fill(&mut img, label_w - 1, label_w, 28, height - 8, 0.0);
    for (i, bar) in bars.iter().enumerate() {
        let top = 30 + i * row_h;
        draw_text(&mut img, &bar.label, 4, top + 4, 0.0);
        if let Some(note) = &bar.note {
            draw_text(&mut img, note, 4, top + 18, 0.45);
        }
        let len = (bar.value.clamp(0.0, 1.0) * plot_w as f64).round() as usize;
        fill(&mut img, label_w, label_w + len, top + 4, top + 22, 0.35);
        let lo = ((bar.value - bar.spread).clamp(0.0, 1.0) * plot_w as f64).round() as usize;
        let hi = ((bar.value + bar.spread).clamp(0.0, 1.0) * plot_w as f64).round() as usize;
        fill(&mut img, label_w + lo, label_w + hi + 1, top + 12, top + 14, 0.0);
        fill(&mut img, label_w + lo, label_w + lo + 1, top + 8, top + 18, 0.0);
        fill(&mut img, label_w + hi, label_w + hi + 1, top + 8, top + 18, 0.0);
        let text = format!("{:.1}+-{:.1}", 100.0 * bar.value, 100.0 * bar.spread);
        draw_text(&mut img, &text, label_w + plot_w + 6, top + 8, 0.0);
    }
    img
}

pub fn save_bar_chart(path: &Path, title: &str, bars: &[Bar]) -> Result<()> {
    bar_chart(title, bars).save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_lengths_follow_values() {
        let bars = [
            Bar {
                label: "A".into(),
                value: 0.5,
                spread: 0.0,
                note: None,
            },
            Bar {
                label: "B".into(),
                value: 1.0,
                spread: 0.1,
                note: Some("REF 80.8".into()),
            },
        ];
        let img = bar_chart("T", &bars);
        let dark = |row: usize| (0..img.width).filter(|&x| (img.get(0, row, x) - 0.35).abs() < 1e-6).count();
        // Row centres at 30 + 6 and 30 + 34 + 6.
        assert_eq!(dark(36), 150);
        assert_eq!(dark(70), 300);
    }

    #[test]
    fn every_label_character_has_a_glyph() {
        for c in "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.:+-_=/%()<>".chars() {
            assert!(glyph(c).iter().any(|&r| r != 0), "{c}");
        }
    }
}
