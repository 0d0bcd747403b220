//! Body-region masking: keep the patient's body, blank everything else
//! (scanner table, labels, exterior artifacts).
//!
//! Threshold the slice, keep the largest 8-connected foreground component,
//! fill its holes, and zero every pixel outside the resulting region.

use std::collections::VecDeque;

use super::Image;

pub const BODY_THRESHOLD: f32 = 0.15;

#[derive(Clone, Debug)]
pub struct BodyMask {
    pub image: Image,
    /// Row-major membership of the body region.
    pub body: Vec<bool>,
    /// Set when nothing exceeded the threshold; `image` is then the input.
    pub empty_foreground: bool,
}

impl BodyMask {
    /// Bounding box `(x0, y0, x1, y1)` of the body, half-open.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let w = self.image.width;
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.body.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % w, i / w);
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bb
    }

    /// Fraction of pixels outside the body that were non-zero before masking.
    pub fn exterior_fraction(&self, original: &Image) -> f64 {
        let total = original.pixels.len().max(1);
        let outside = original
            .pixels
            .iter()
            .zip(&self.body)
            .filter(|(&p, &b)| !b && p > 0.0)
            .count();
        outside as f64 / total as f64
    }
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];
const NEIGHBORS_4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

fn flood(
    w: usize,
    h: usize,
    seeds: impl IntoIterator<Item = usize>,
    passable: impl Fn(usize) -> bool,
    neighbors: &[(isize, isize)],
    visited: &mut [bool],
) -> Vec<usize> {
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut members = Vec::new();
    for s in seeds {
        if !visited[s] && passable(s) {
            visited[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        members.push(i);
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for &(dx, dy) in neighbors {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !visited[j] && passable(j) {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    members
}

pub fn body_region_mask(img: &Image, threshold: f32) -> BodyMask {
    let (w, h) = (img.width, img.height);
    let fg: Vec<bool> = img.pixels.iter().map(|&p| p > threshold).collect();

    // largest 8-connected component; the first found wins ties
    let mut visited = vec![false; w * h];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..w * h {
        if fg[start] && !visited[start] {
            let comp = flood(w, h, [start], |j| fg[j], &NEIGHBORS_8, &mut visited);
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }
    if best.is_empty() {
        return BodyMask {
            image: img.clone(),
            body: vec![false; w * h],
            empty_foreground: true,
        };
    }
    let mut body = vec![false; w * h];
    for &i in &best {
        body[i] = true;
    }

    // holes: non-body pixels not 4-reachable from the border
    let mut outside = vec![false; w * h];
    let border = (0..w)
        .flat_map(|x| [x, (h - 1) * w + x])
        .chain((0..h).flat_map(|y| [y * w, y * w + w - 1]));
    flood(w, h, border, |j| !body[j], &NEIGHBORS_4, &mut outside);
    for i in 0..w * h {
        if !outside[i] {
            body[i] = true;
        }
    }

    let pixels = img
        .pixels
        .iter()
        .zip(&body)
        .map(|(&p, &b)| if b { p } else { 0.0 })
        .collect();
    BodyMask {
        image: Image {
            width: w,
            height: h,
            pixels,
        },
        body,
        empty_foreground: false,
    }
}
