//! Parametric shape images with a controllable source/target shift.
//!
//! Source images draw warm shapes on dark backgrounds. Target images use a
//! disjoint set of shape classes drawn dark-on-light in cool colours with a
//! stripe texture and stronger noise, so features learnt on the source only
//! partially transfer.

use rand::Rng;

use super::{Dataset, Split};
use crate::tensor::{derive_rng, SeededRng};

pub const SHAPES: [&str; 12] = [
    "disk", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar", "cross", "ell", "checker", "frame",
];

pub const SHIFT_IMAGE_SIZE: usize = 16;
pub const SHIFT_CHANNELS: usize = 3;

/// Whether the point `(u, v)` in shape-local coordinates (roughly
/// `[-1, 1]²`, `v` pointing down) lies inside shape `kind`.
fn inside(kind: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r = (u * u + v * v).sqrt();
    match kind {
        0 => r <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && au <= (v + 0.8) * 0.6,
        3 => (au <= 0.3 && av <= 0.9) || (av <= 0.3 && au <= 0.9),
        4 => (0.55..=1.0).contains(&r),
        5 => au + av <= 1.0,
        6 => av <= 0.3 && au <= 0.95,
        7 => au <= 0.3 && av <= 0.95,
        8 => (au - av).abs() <= 0.3 && au.max(av) <= 0.9,
        9 => ((-0.8..=-0.3).contains(&u) && av <= 0.9) || ((0.4..=0.9).contains(&v) && (-0.8..=0.9).contains(&u)),
        10 => au <= 0.9 && av <= 0.9 && ((u > 0.0) != (v > 0.0)),
        _ => au.max(av) <= 0.9 && au.max(av) >= 0.55,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Source,
    Target,
}

fn channel(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// One `[3, 16, 16]` image of shape `kind`.
pub fn render(rng: &mut SeededRng, kind: usize, domain: Domain) -> Vec<u8> {
    let n = SHIFT_IMAGE_SIZE;
    let half = n as f64 / 2.0;
    let cx = half + rng.random_range(-2.0..2.0);
    let cy = half + rng.random_range(-2.0..2.0);
    let radius = rng.random_range(0.3..0.45) * n as f64;
    let (bg, fg, noise, stripe) = match domain {
        Domain::Source => {
            let bg = [channel(rng, 20.0, 60.0), channel(rng, 20.0, 60.0), channel(rng, 20.0, 60.0)];
            let fg = [channel(rng, 180.0, 255.0), channel(rng, 80.0, 200.0), channel(rng, 0.0, 80.0)];
            (bg, fg, 10.0, 0.0)
        }
        Domain::Target => {
            let bg = [channel(rng, 150.0, 210.0), channel(rng, 160.0, 220.0), channel(rng, 180.0, 240.0)];
            let fg = [channel(rng, 0.0, 60.0), channel(rng, 40.0, 120.0), channel(rng, 100.0, 200.0)];
            (bg, fg, 25.0, 30.0)
        }
    };
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut img = vec![0u8; SHIFT_CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            let on = inside(kind, u, v);
            let tex = stripe * ((x + y) as f64 * 1.3 + phase).sin();
            for c in 0..SHIFT_CHANNELS {
                let base = if on { fg[c] } else { bg[c] };
                let val = base + tex + rng.random_range(-noise..=noise);
                img[c * n * n + y * n + x] = val.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn build(rng: &mut SeededRng, kinds: &[usize], per_class: usize, domain: Domain) -> Split {
    let mut split = Split::default();
    for _ in 0..per_class {
        for (label, &kind) in kinds.iter().enumerate() {
            split.images.extend(render(rng, kind, domain));
            split.labels.push(label);
        }
    }
    split
}

/// Source and target tasks, each with `n_per_class` training and
/// `max(1, n_per_class / 2)` test images per class. Target classes are the
/// shapes following the source ones, so labels are disjoint while
/// `2·n_classes ≤ 12`; beyond that target shapes wrap around.
pub fn make_shift_task(seed: u64, n_classes: usize, n_per_class: usize) -> (Dataset, Dataset) {
    let source_kinds: Vec<usize> = (0..n_classes).map(|k| k % SHAPES.len()).collect();
    let target_kinds: Vec<usize> = (0..n_classes).map(|k| (n_classes + k) % SHAPES.len()).collect();
    let test_per_class = (n_per_class / 2).max(1);
    let make = |kinds: &[usize], domain: Domain, tag: &str| {
        let mut rng = derive_rng(seed, tag);
        let train = build(&mut rng, kinds, n_per_class, domain);
        let test = build(&mut rng, kinds, test_per_class, domain);
        Dataset {
            name: tag.to_string(),
            channels: SHIFT_CHANNELS,
            image_size: SHIFT_IMAGE_SIZE,
            class_names: kinds.iter().map(|&k| SHAPES[k].to_string()).collect(),
            train,
            val: None,
            test: Some(test),
        }
    };
    let source = make(&source_kinds, Domain::Source, "shift-source");
    let target = make(&target_kinds, Domain::Target, "shift-target");
    (source, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let (s1, t1) = make_shift_task(5, 4, 3);
        let (s2, t2) = make_shift_task(5, 4, 3);
        assert_eq!(s1.train, s2.train);
        assert_eq!(t1.test, t2.test);
        assert!(s1.class_names.iter().all(|c| !t1.class_names.contains(c)));
        assert_eq!(s1.train.len(), 12);
        assert_eq!(t1.test.as_ref().unwrap().len(), 4);
        s1.validate().unwrap();
        t1.validate().unwrap();
    }

    #[test]
    fn every_shape_covers_some_pixels() {
        let mut rng = derive_rng(0, "t");
        for kind in 0..SHAPES.len() {
            let img = render(&mut rng, kind, Domain::Source);
            // warm foreground is bright in the red channel
            let lit = img[..256].iter().filter(|&&p| p > 150).count();
            assert!((10..250).contains(&lit), "{} lit {lit}", SHAPES[kind]);
        }
    }

    #[test]
    fn target_statistics_differ() {
        let (s, t) = make_shift_task(1, 3, 20);
        let mean = |x: &Split| x.images.iter().map(|&p| p as f64).sum::<f64>() / x.images.len() as f64;
        assert!(mean(&t.train) - mean(&s.train) > 50.0);
    }
}
