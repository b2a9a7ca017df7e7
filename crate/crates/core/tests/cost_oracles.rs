//! Analyzer totals against the live model: parameter enumeration and the
//! runtime multiply-accumulate counter.

mod common;

use common::random_tiny_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segresmamba::cost::{count_macs, count_params, estimate_peak_memory, total_params, LayerKind};
use segresmamba::counter;
use segresmamba::model::{ModelConfig, SegResMamba};
use segresmamba::nn::Module;
use segresmamba::{no_grad, Tensor};

#[test]
fn params_match_live_enumeration_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..20 {
        let cfg = random_tiny_config(&mut rng);
        let model = SegResMamba::new(cfg.clone(), &mut rng).unwrap();
        let named = model.named_parameters();
        let rows = count_params(&cfg).unwrap();
        for row in &rows {
            let prefix = format!("{}.", row.name);
            let live: usize = named
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(_, t)| t.numel())
                .sum();
            assert_eq!(
                row.params, live as u64,
                "trial {trial}: {} in {cfg:?}",
                row.name
            );
        }
        let claimed: usize = named
            .iter()
            .filter(|(n, _)| rows.iter().any(|r| n.starts_with(&format!("{}.", r.name))))
            .count();
        assert_eq!(
            claimed,
            named.len(),
            "trial {trial}: parameters not covered by any row"
        );
        assert_eq!(total_params(&cfg).unwrap(), model.param_count() as u64);
    }
}

#[test]
fn default_config_params_match_enumeration() {
    let cfg = ModelConfig::default();
    let model = SegResMamba::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(total_params(&cfg).unwrap(), model.param_count() as u64);
}

#[test]
fn macs_match_instrumented_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for trial in 0..20 {
        let cfg = random_tiny_config(&mut rng);
        let model = SegResMamba::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, cfg.in_channels, 32, 32, 32]).unwrap();
        let (out, counted) = counter::count_macs(|| no_grad(|| model.forward(&x)));
        out.unwrap();
        let rows = count_macs(&cfg, [32, 32, 32]).unwrap();
        let analyzed: u64 = rows.iter().map(|r| r.macs).sum();
        assert_eq!(analyzed, counted, "trial {trial}: {cfg:?}");
        for r in &rows {
            match r.kind {
                LayerKind::Conv | LayerKind::ConvTranspose | LayerKind::Mamba => {
                    assert_eq!(r.flops, 2 * r.macs)
                }
                _ => assert_eq!(r.macs, 0),
            }
        }
    }
}

#[test]
fn macs_count_batch_linearly_in_the_counter() {
    let mut cfg = ModelConfig::reduced([2, 4, 4, 8], 2);
    cfg.mamba.d_state = 2;
    let model = SegResMamba::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Tensor::zeros(&[2, cfg.in_channels, 32, 32, 32]).unwrap();
    let (_, counted) = counter::count_macs(|| no_grad(|| model.forward(&x)));
    let per_sample: u64 = count_macs(&cfg, [32, 32, 32])
        .unwrap()
        .iter()
        .map(|r| r.macs)
        .sum();
    assert_eq!(counted, 2 * per_sample);
}

#[test]
fn memory_and_macs_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let macs = |cfg: &ModelConfig, e: [usize; 3]| -> u64 {
        count_macs(cfg, e).unwrap().iter().map(|r| r.macs).sum()
    };
    let mem =
        |cfg: &ModelConfig, e: [usize; 3]| estimate_peak_memory(cfg, e, 1, 4).unwrap().total_bytes;
    for _ in 0..20 {
        let base = random_tiny_config(&mut rng);
        for k in 0..4 {
            let mut wider = base.clone();
            wider.stage_channels[k] += base.norm_groups;
            assert!(macs(&wider, [32; 3]) >= macs(&base, [32; 3]));
            assert!(mem(&wider, [32; 3]) >= mem(&base, [32; 3]));
        }
        for axis in 0..3 {
            let mut e = [32; 3];
            e[axis] = 64;
            assert!(macs(&base, e) >= macs(&base, [32; 3]));
            assert!(mem(&base, e) >= mem(&base, [32; 3]));
        }
    }
}
