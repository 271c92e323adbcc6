use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sida_core::checkpoint::{Checkpoint, Header, Role};
use sida_core::config::RunConfig;
use sida_core::diffmath::{Graph, ParamSet, Tensor};
use sida_core::eval::{energy_distance, sliced_wasserstein};
use sida_core::losses::{discriminator_loss, pooled_fakeness, sid_loss_alg1, sid_loss_eq6, sid_term_scale};
use sida_core::nets::{forced_weight_normalize, ForcedNorm};
use sida_core::presets;

fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, d], &mut rng).map(|v| v + shift)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_symmetric_and_zero_on_self(seed in 0u64..1000, shift in -2.0f64..2.0, d in 1usize..4) {
        let a = cloud(100, d, 0.0, seed);
        let b = cloud(100, d, shift, seed + 1);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let s1 = sliced_wasserstein(&a, &b, 8, seed).unwrap();
        let s2 = sliced_wasserstein(&b, &a, 8, seed).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-12 * (1.0 + s1));
        prop_assert_eq!(sliced_wasserstein(&a, &a, 8, seed).unwrap(), 0.0);
    }

    #[test]
    fn sid_forms_agree(
        phi in matrix(4, 3),
        psi in matrix(4, 3),
        x in matrix(4, 3),
        alpha in -1.0f64..2.0,
        pre in prop::collection::vec(0.0f64..10.0, 4),
    ) {
        let g = Graph::new();
        let (vp, vq, vx) = (g.input(phi.clone()), g.input(psi.clone()), g.input(x.clone()));
        let a = sid_loss_eq6(vp, vq, vx, alpha, &pre).unwrap().item();
        let b = sid_loss_alg1(vp, vq, vx, alpha, &pre).unwrap().item();
        let scale = sid_term_scale(&phi, &psi, &x, alpha, &pre);
        prop_assert!((a - b).abs() <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn pooled_fakeness_is_nonpositive(logits in matrix(8, 3), group in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let g = Graph::new();
        let p = pooled_fakeness(g.input(logits), group).unwrap().value();
        prop_assert_eq!(p.shape(), &[8]);
        prop_assert!(p.data().iter().all(|v| *v <= 0.0));
        for chunk in p.data().chunks(group) {
            prop_assert!(chunk.iter().all(|v| *v == chunk[0]));
        }
    }

    #[test]
    fn discriminator_loss_is_nonnegative(real in matrix(6, 2), fake in matrix(6, 2)) {
        let g = Graph::new();
        let l = discriminator_loss(g.input(real), g.input(fake)).unwrap().item();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn forced_normalization_is_idempotent(w in matrix(5, 4), mode in prop::sample::select(vec![ForcedNorm::InPlace, ForcedNorm::PreHook])) {
        let mut p = ParamSet::new();
        p.insert("w", w);
        let names = vec!["w".to_string()];
        forced_weight_normalize(&mut p, &names, mode);
        let once = p.clone();
        forced_weight_normalize(&mut p, &names, mode);
        prop_assert!(p.get("w").unwrap().max_abs_diff(once.get("w").unwrap()) < 1e-12);
        for i in 0..5 {
            let n: f64 = once.get("w").unwrap().row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_normalization_off_is_identity(w in matrix(3, 3)) {
        let mut p = ParamSet::new();
        p.insert("w", w.clone());
        forced_weight_normalize(&mut p, &["w".to_string()], ForcedNorm::Off);
        prop_assert_eq!(p.get("w").unwrap(), &w);
    }

    #[test]
    fn checkpoint_round_trip(a in matrix(3, 2), b in prop::collection::vec(-1e6f64..1e6, 1..8), seen in any::<u64>(), stage in 0u8..2) {
        let mut params = ParamSet::new();
        params.insert("layer.w", a);
        params.insert("layer.b", Tensor::vector(b));
        let ck = Checkpoint {
            header: Header { compat_hash: "ab".repeat(32), images_seen: seen, stage_b: stage, role: Role::GeneratorEma },
            params,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn truncated_checkpoint_rejected(cut in 1usize..40) {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[2, 2]));
        let ck = Checkpoint {
            header: Header { compat_hash: "0".repeat(64), images_seen: 1, stage_b: 0, role: Role::Generator },
            params,
        };
        let bytes = ck.to_bytes().unwrap();
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn config_canonical_round_trip(idx in 0usize..24, seed in any::<u32>(), alpha in -1.0f64..2.0, lr in 1e-5f64..1e-2) {
        let name = presets::names().nth(idx).unwrap();
        let cfg = presets::load(name).unwrap().with_overrides(&[
            format!("seed={seed}"),
            format!("loss.alpha={alpha}"),
            format!("train.lr_gen={lr}"),
        ]).unwrap();
        let json = cfg.canonical_json().unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.canonical_json().unwrap(), json);
        prop_assert_eq!(back.full_hash().unwrap(), cfg.full_hash().unwrap());
        // training-only knobs leave the checkpoint hash alone
        prop_assert_eq!(cfg.compat_hash().unwrap(), presets::load(name).unwrap().compat_hash().unwrap());
    }
}
