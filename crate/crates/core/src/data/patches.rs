use crate::error::{Error, Result};
use crate::synth::CharBox;

/// For each box, the vertical patches whose column span `[p*pw, (p+1)*pw)`
/// overlaps the box's `[x0, x1)` by at least one pixel.
pub fn char_boxes_to_patch_indices(
    boxes: &[CharBox],
    patch_width: usize,
    image_width: usize,
) -> Result<Vec<Vec<usize>>> {
    if patch_width == 0 || image_width % patch_width != 0 {
        return Err(Error::Config(format!(
            "patch width {patch_width} does not divide image width {image_width}"
        )));
    }
    let num_patches = image_width / patch_width;
    boxes
        .iter()
        .map(|b| {
            if b.x0 >= b.x1 || b.x1 > image_width {
                return Err(Error::Shape(format!(
                    "box [{}, {}) invalid for width {image_width}",
                    b.x0, b.x1
                )));
            }
            let first = b.x0 / patch_width;
            let last = ((b.x1 - 1) / patch_width).min(num_patches - 1);
            Ok((first..=last).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: usize, x1: usize) -> CharBox {
        CharBox { x0, x1, y0: 0, y1: 1 }
    }

    // Brute-force: test every pixel of every patch for membership.
    fn overlap_oracle(b: CharBox, pw: usize, w: usize) -> Vec<usize> {
        (0..w / pw)
            .filter(|p| (p * pw..(p + 1) * pw).any(|x| x >= b.x0 && x < b.x1))
            .collect()
    }

    #[test]
    fn examples() {
        let got = char_boxes_to_patch_indices(&[bx(8, 16), bx(0, 4), bx(3, 5)], 4, 32).unwrap();
        assert_eq!(got, vec![vec![2, 3], vec![0], vec![0, 1]]);
        assert!(char_boxes_to_patch_indices(&[bx(0, 4)], 5, 32).is_err());
    }

    proptest! {
        #[test]
        fn matches_pixel_oracle(x0 in 0usize..63, len in 1usize..20, pw in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let w = 64;
            let b = bx(x0, (x0 + len).min(w));
            let got = char_boxes_to_patch_indices(&[b], pw, w).unwrap();
            prop_assert_eq!(&got[0], &overlap_oracle(b, pw, w));
            prop_assert!(got[0].iter().all(|&p| p < w / pw));
        }
    }
}
