//! Structured random presets used to generate training corpora.
//!
//! A uniform draw over every parameter gives presets without learnable
//! regularities. For descriptors the FM synth understands, the prior instead
//! ties operator levels to their routing role: carriers are mostly loud,
//! modulators are often switched off or kept at moderate levels. Other
//! descriptors fall back to uniform classes and grid points.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::schema::{ParamKind, Preset, QuantGrid, SynthDescriptor};
use crate::synth::{algorithm_graph, FmLayout, NUM_OPERATORS, RATIO_TABLE};

fn grid_point<R: Rng>(rng: &mut R, grid: QuantGrid, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..=hi);
    grid.value(grid.nearest_index(v))
}

fn uniform_point<R: Rng>(rng: &mut R, grid: QuantGrid) -> f64 {
    grid.value(rng.random_range(0..grid.steps()))
}

/// Deterministic for a given seed; the result always validates.
pub fn sample_random_preset(descriptor: &SynthDescriptor, seed: u64) -> Preset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = descriptor
        .params
        .iter()
        .map(|p| match p.kind {
            ParamKind::Categorical { num_classes } => rng.random_range(0..num_classes) as f64,
            ParamKind::Numerical { grid } => uniform_point(&mut rng, grid),
        })
        .collect();

    let Ok(layout) = FmLayout::new(descriptor) else {
        return Preset::new(values);
    };
    let graph = algorithm_graph(values[layout.algorithm] as usize).expect("class within range");
    let grid_of = |i: usize| descriptor.params[i].grid().expect("operator fields are numerical");

    for k in 0..NUM_OPERATORS {
        let idx = |name| layout.field(k, name);

        let level = grid_of(idx("level"));
        let u: f64 = rng.random();
        values[idx("level")] = if graph.is_carrier(k) {
            if u < 0.85 {
                grid_point(&mut rng, level, 0.7, 1.0)
            } else {
                grid_point(&mut rng, level, 0.35, 0.7)
            }
        } else if u < 0.3 {
            0.0
        } else if u < 0.7 {
            grid_point(&mut rng, level, 0.3, 0.7)
        } else {
            grid_point(&mut rng, level, 0.7, 1.0)
        };

        // Integer ratios dominate musically useful FM.
        let ratio = grid_of(idx("ratio"));
        values[idx("ratio")] = if rng.random::<f64>() < 0.6 {
            let integer_slots: Vec<usize> = RATIO_TABLE
                .iter()
                .enumerate()
                .filter(|(_, r)| r.fract() == 0.0 && **r <= 4.0)
                .map(|(i, _)| i)
                .collect();
            let slot = integer_slots[rng.random_range(0..integer_slots.len())];
            ratio.value(slot * (ratio.steps() - 1) / (RATIO_TABLE.len() - 1))
        } else {
            uniform_point(&mut rng, ratio)
        };

        let attack = grid_of(idx("attack"));
        let a: f64 = rng.random();
        values[idx("attack")] = attack.value(attack.nearest_index(a * a));

        let sustain = grid_of(idx("sustain"));
        let s: f64 = rng.random();
        values[idx("sustain")] = if s < 0.05 {
            0.0
        } else if s < 0.1 {
            1.0
        } else {
            grid_point(&mut rng, sustain, 0.05, 0.95)
        };
    }
    Preset::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_preset;

    #[test]
    fn same_seed_gives_bit_identical_presets() {
        let d = SynthDescriptor::builtin();
        let a = sample_random_preset(&d, 99);
        let b = sample_random_preset(&d, 99);
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, sample_random_preset(&d, 100));
    }

    #[test]
    fn algorithm_histogram_is_uniform_within_five_sigma() {
        let d = SynthDescriptor::builtin();
        let n = 10_000;
        let mut counts = [0usize; 8];
        for seed in 0..n {
            let p = sample_random_preset(&d, seed);
            assert!(validate_preset(&d, &p).is_empty());
            counts[p.class(0)] += 1;
        }
        let expected = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for (c, &k) in counts.iter().enumerate() {
            assert!(
                (k as f64 - expected).abs() < 5.0 * sigma,
                "class {c}: {k} vs {expected} +- {}",
                5.0 * sigma
            );
        }
    }

    #[test]
    fn carriers_are_mostly_on_and_modulators_often_off() {
        let d = SynthDescriptor::builtin();
        let layout = FmLayout::new(&d).unwrap();
        let (mut carrier_off, mut carriers, mut mod_off, mut mods) = (0, 0, 0, 0);
        for seed in 0..2000 {
            let p = sample_random_preset(&d, seed);
            let g = algorithm_graph(p.class(0)).unwrap();
            for k in 0..NUM_OPERATORS {
                let off = p.get(layout.field(k, "level")) == 0.0;
                if g.is_carrier(k) {
                    carriers += 1;
                    carrier_off += off as usize;
                } else {
                    mods += 1;
                    mod_off += off as usize;
                }
            }
        }
        assert_eq!(carrier_off, 0);
        let frac = mod_off as f64 / mods as f64;
        assert!((0.25..0.35).contains(&frac), "{frac}");
        assert!(carriers > 0);
    }
}
