use std::collections::VecDeque;

use geoedit_core::imaging::{ImageBuffer, MaskBuffer};

/// Flood fill from each click over 4-connected pixels whose color lies
/// within `tolerance` (max channel difference, `[0, 1]` scale) of the
/// clicked pixel. The result is the union over clicks; clicks outside the
/// image are ignored.
pub fn region_grow(img: &ImageBuffer, clicks: &[(usize, usize)], tolerance: f32) -> MaskBuffer {
    let (h, w) = (img.height(), img.width());
    let mut mask = MaskBuffer::empty(h, w);
    for &(x, y) in clicks {
        if x >= w || y >= h {
            continue;
        }
        let seed: Vec<f32> = img.pixel(y, x).to_vec();
        let close = |yy: usize, xx: usize| {
            img.pixel(yy, xx)
                .iter()
                .zip(&seed)
                .all(|(a, b)| (a - b).abs() <= tolerance)
        };
        let mut seen = vec![false; h * w];
        let mut queue = VecDeque::from([(y, x)]);
        seen[y * w + x] = true;
        while let Some((cy, cx)) = queue.pop_front() {
            mask.set(cy, cx, true);
            let mut push = |ny: usize, nx: usize| {
                if !seen[ny * w + nx] && close(ny, nx) {
                    seen[ny * w + nx] = true;
                    queue.push_back((ny, nx));
                }
            };
            if cy > 0 {
                push(cy - 1, cx);
            }
            if cy + 1 < h {
                push(cy + 1, cx);
            }
            if cx > 0 {
                push(cy, cx - 1);
            }
            if cx + 1 < w {
                push(cy, cx + 1);
            }
        }
    }
    mask
}
