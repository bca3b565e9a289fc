use std::collections::HashSet;

use super::{AnnotationLabel, ImageRecord, PatchLabel, PatchRef, RgbImage};

/// Side of a training patch, equal to the model receptive field.
pub const PATCH_SIZE: usize = 78;

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Crops a `(size + 2 * margin)` square around `r`, reflecting at borders.
/// The center pixel of the unmargined window, index `size / 2 - 1`, is
/// `(cx, cy)`.
pub fn extract_patch(img: &RgbImage, r: &PatchRef, size: usize, margin: usize) -> Vec<u8> {
    let side = size + 2 * margin;
    let offset = (size / 2).saturating_sub(1) as i64 + margin as i64;
    let x0 = r.cx - offset;
    let y0 = r.cy - offset;
    let mut out = Vec::with_capacity(side * side * 3);
    let interior = x0 >= 0 && y0 >= 0 && x0 as usize + side <= img.width && y0 as usize + side <= img.height;
    for dy in 0..side {
        if interior {
            let start = ((y0 as usize + dy) * img.width + x0 as usize) * 3;
            out.extend_from_slice(&img.data[start..start + side * 3]);
        } else {
            let sy = reflect_index(y0 + dy as i64, img.height);
            for dx in 0..side {
                let sx = reflect_index(x0 + dx as i64, img.width);
                out.extend_from_slice(&img.pixel(sx, sy));
            }
        }
    }
    out
}

/// Stride-spaced grid centers at least `min_dist` from every mitotic
/// figure. The grid starts at `stride / 2` on both axes.
pub fn enumerate_negative_centers(record: &ImageRecord, min_dist: f64, stride: usize) -> Vec<PatchRef> {
    assert!(stride >= 1, "stride must be positive");
    let mitoses: Vec<(f64, f64)> = record.mitoses().map(|a| (a.x, a.y)).collect();
    let min_sq = min_dist * min_dist;
    let mut out = Vec::new();
    let start = stride / 2;
    for cy in (start..record.height as usize).step_by(stride) {
        for cx in (start..record.width as usize).step_by(stride) {
            let far = mitoses.iter().all(|&(mx, my)| {
                let (dx, dy) = (cx as f64 - mx, cy as f64 - my);
                dx * dx + dy * dy >= min_sq
            });
            if far {
                out.push(PatchRef::new(record.id.clone(), cx as i64, cy as i64, PatchLabel::Negative));
            }
        }
    }
    out
}

/// Grid negatives plus any non-mitotic-figure annotations that are far
/// enough from every mitosis.
pub fn negative_pool(record: &ImageRecord, min_dist: f64, stride: usize) -> Vec<PatchRef> {
    let mut pool = enumerate_negative_centers(record, min_dist, stride);
    let mut seen: HashSet<(i64, i64)> = pool.iter().map(|r| (r.cx, r.cy)).collect();
    let mitoses: Vec<(f64, f64)> = record.mitoses().map(|a| (a.x, a.y)).collect();
    for a in record
        .annotations
        .iter()
        .filter(|a| a.label == AnnotationLabel::NonMitoticFigure)
    {
        let far = mitoses
            .iter()
            .all(|&(mx, my)| (a.x - mx).hypot(a.y - my) >= min_dist);
        let c = (a.x.round() as i64, a.y.round() as i64);
        if far && seen.insert(c) {
            pool.push(PatchRef::new(record.id.clone(), c.0, c.1, PatchLabel::Negative));
        }
    }
    pool
}

pub fn positive_refs(record: &ImageRecord) -> Vec<PatchRef> {
    record
        .mitoses()
        .map(|a| PatchRef::new(record.id.clone(), a.x.round() as i64, a.y.round() as i64, PatchLabel::Positive))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Annotation;

    fn record(w: u32, h: u32, anns: Vec<Annotation>) -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            file: "img.png".into(),
            domain: "d".into(),
            width: w,
            height: h,
            annotations: anns,
        }
    }

    fn mitosis(x: f64, y: f64) -> Annotation {
        Annotation {
            x,
            y,
            label: AnnotationLabel::MitoticFigure,
        }
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(8, 5), 0);
        assert_eq!(reflect_index(3, 5), 3);
    }

    #[test]
    fn empty_image_returns_full_grid() {
        let r = record(100, 100, vec![]);
        let c = enumerate_negative_centers(&r, 25.0, 50);
        let pts: Vec<_> = c.iter().map(|p| (p.cx, p.cy)).collect();
        assert_eq!(pts, vec![(25, 25), (75, 25), (25, 75), (75, 75)]);
        assert!(c.iter().all(|p| p.label == PatchLabel::Negative));
    }

    #[test]
    fn mitosis_on_grid_point_removes_neighbourhood() {
        let r = record(120, 120, vec![mitosis(54.0, 54.0)]);
        // stride 12, grid 6, 18, ..., min_dist > 12 * sqrt(2)
        let c = enumerate_negative_centers(&r, 17.5, 12);
        let pts: HashSet<_> = c.iter().map(|p| (p.cx, p.cy)).collect();
        for (dx, dy) in [(0, 0), (12, 0), (-12, 0), (0, 12), (0, -12), (12, 12), (-12, -12)] {
            assert!(!pts.contains(&(54 + dx, 54 + dy)));
        }
        assert!(pts.contains(&(54 + 24, 54)));
        assert_eq!(pts.len(), 100 - 9);
    }

    #[test]
    fn tiny_min_dist_only_excludes_coincident_center() {
        let r = record(60, 60, vec![mitosis(33.0, 33.0), mitosis(31.5, 7.0)]);
        let c = enumerate_negative_centers(&r, 0.1, 6);
        assert_eq!(c.len(), 100 - 1);
        assert!(!c.iter().any(|p| (p.cx, p.cy) == (33, 33)));
    }

    #[test]
    fn pool_adds_hard_annotations() {
        let mut anns = vec![mitosis(50.0, 50.0)];
        anns.push(Annotation {
            x: 90.2,
            y: 20.7,
            label: AnnotationLabel::NonMitoticFigure,
        });
        anns.push(Annotation {
            x: 55.0,
            y: 52.0,
            label: AnnotationLabel::NonMitoticFigure,
        });
        let r = record(100, 100, anns);
        let pool = negative_pool(&r, 25.0, 12);
        assert!(pool.iter().any(|p| (p.cx, p.cy) == (90, 21)));
        assert!(!pool.iter().any(|p| (p.cx, p.cy) == (55, 52)));
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = RgbImage::filled(100, 90, [10, 20, 30]);
        let p = extract_patch(&img, &PatchRef::new("i", 50, 45, PatchLabel::Negative), 78, 0);
        assert_eq!(p.len(), 78 * 78 * 3);
        assert!(p.chunks(3).all(|c| c == [10, 20, 30]));
    }
}
