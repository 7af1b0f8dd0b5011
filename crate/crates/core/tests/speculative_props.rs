use cspd_core::models::checkpoint::Checkpoint;
use cspd_core::models::{init_draft_from_target, InitScales};
use cspd_core::speculative::{
    draft_generate, run_cspd, sample_direct, verify_parallel, RunMetrics, SpecConfig,
};
use cspd_core::{
    AnalyticGaussianModel, ArModel, GaussianParams, LatentToken, RandomSource, ToyARModel,
};
use proptest::prelude::*;

fn toy_pair(seed: u64, dim: usize, sharpen: f64) -> (ToyARModel, ToyARModel) {
    let rng = RandomSource::new(seed);
    let target = ToyARModel::random(
        dim,
        4,
        2,
        &InitScales::default(),
        &mut rng.substream("target"),
    )
    .unwrap();
    let mut draft = init_draft_from_target(&target, 2).unwrap();
    draft.sharpen_attention(sharpen);
    (target, draft)
}

fn analytic(m: f64, v: f64) -> AnalyticGaussianModel {
    AnalyticGaussianModel::from_moments(vec![m], vec![v]).unwrap()
}

/// Two-sample KS statistic, written out independently of the bench oracle.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn acceptance(
    target: &AnalyticGaussianModel,
    draft: &AnalyticGaussianModel,
    cfg: &SpecConfig,
    seqs: u64,
) -> f64 {
    let cond = LatentToken::zeros(1);
    let mut total = RunMetrics::default();
    for i in 0..seqs {
        let (_, m) = run_cspd(target, draft, &cond, 12, cfg, &RandomSource::new(i)).unwrap();
        total.merge(&m);
    }
    total.acceptance_rate()
}

#[test]
fn toy_output_matches_direct_sampling_without_early_stop() {
    let (target, draft) = toy_pair(11, 2, 5.0);
    let cfg = SpecConfig {
        early_stop: false,
        ..Default::default()
    };
    let cond = LatentToken::new(vec![0.3, -0.2]).unwrap();
    let (n, len) = (2000, 4);
    let mut spec = vec![Vec::new(); len * 2];
    let mut direct = vec![Vec::new(); len * 2];
    let mut accepted = 0;
    for i in 0..n {
        let (out, m) = run_cspd(&target, &draft, &cond, len, &cfg, &RandomSource::new(i)).unwrap();
        accepted += m.accepted;
        let reference =
            sample_direct(&target, &cond, len, &cfg, &RandomSource::new(1_000_000 + i)).unwrap();
        for k in 0..len {
            for d in 0..2 {
                spec[2 * k + d].push(out[k].as_slice()[d]);
                direct[2 * k + d].push(reference[k].as_slice()[d]);
            }
        }
    }
    assert!(accepted > 0, "the draft must be exercised");
    // Bonferroni over 8 position/coordinate pairs at overall level 1e-3
    let alpha = 1e-3 / 8.0;
    let critical = (-0.5 * (alpha / 2.0f64).ln()).sqrt() * (2.0 / n as f64).sqrt();
    for (k, (a, b)) in spec.into_iter().zip(direct).enumerate() {
        let d = ks(a, b);
        assert!(
            d < critical,
            "position/coordinate {k}: KS {d} >= {critical}"
        );
    }
}

#[test]
fn acceptance_falls_with_draft_offset() {
    let target = analytic(0.0, 1.0);
    let cfg = SpecConfig::default();
    let rates: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 3.0]
        .iter()
        .map(|&mu| acceptance(&target, &analytic(mu, 1.0), &cfg, 400))
        .collect();
    assert_eq!(rates[0], 1.0);
    assert!(rates.windows(2).all(|w| w[1] < w[0]), "{rates:?}");
}

#[test]
fn shared_trajectories_beat_independent_ones() {
    let target = analytic(0.0, 1.0);
    let draft = analytic(0.3, 1.0);
    let shared = SpecConfig {
        trajectory_coupling: 0.8,
        ..Default::default()
    };
    let independent = SpecConfig {
        share_noise: false,
        ..shared.clone()
    };
    let a = acceptance(&target, &draft, &shared, 400);
    let b = acceptance(&target, &draft, &independent, 400);
    assert!(a > b + 0.2, "shared {a} independent {b}");
}

#[test]
fn ratios_match_brute_force_densities() {
    let (target, draft) = toy_pair(5, 3, 2.0);
    let cfg = SpecConfig {
        gamma: 6,
        early_stop: false,
        ..Default::default()
    };
    let cond = LatentToken::new(vec![0.1, 0.0, -0.4]).unwrap();
    for seed in 0..20 {
        let rng = RandomSource::new(seed);
        let ctx = vec![
            LatentToken::zeros(3),
            LatentToken::new(rng.substream("c").normal_vec(3)).unwrap(),
        ];
        let batch = draft_generate(&draft, &ctx, &cond, &cfg, &rng).unwrap();
        let ver = verify_parallel(&target, &ctx, &cond, &batch, &cfg, &rng).unwrap();
        assert_eq!(ver.sigma_factor, 1.0);
        let mut seq = ctx.clone();
        for (i, tok) in batch.tokens.iter().enumerate() {
            let p = target.forward(&seq, &cond).unwrap().next_dist;
            let q = draft.forward(&seq, &cond).unwrap().next_dist;
            let brute = (p.log_density(tok.as_slice()).unwrap()
                - q.log_density(tok.as_slice()).unwrap())
            .exp();
            assert!(
                (ver.ratios[i] - brute).abs() <= 1e-10 * brute.max(1.0),
                "{} vs {brute}",
                ver.ratios[i]
            );
            seq.push(tok.clone());
        }
    }
}

#[test]
fn rigged_threshold_stops_every_round() {
    let (target, draft) = toy_pair(3, 2, 1.0);
    let cond = LatentToken::zeros(2);
    let cfg = SpecConfig {
        tau_ent: f64::INFINITY,
        ..Default::default()
    };
    let (out, m) = run_cspd(&target, &draft, &cond, 9, &cfg, &RandomSource::new(1)).unwrap();
    assert_eq!(out.len(), 9);
    // the last round has no room to draft, so it cannot stop early
    let (last, rest) = m.rounds.split_last().unwrap();
    assert_eq!(m.early_stops, rest.len());
    assert_eq!(m.accepted, 0);
    assert_eq!(m.target_evals, m.tokens);
    for r in rest {
        assert_eq!((r.drafted, r.skipped, r.stop_index), (1, 1, Some(1)));
        assert!(r.bonus_emitted && r.emitted == 1);
    }
    assert_eq!((last.drafted, last.emitted), (0, 1));
    let off = SpecConfig {
        early_stop: false,
        ..cfg
    };
    let (_, m) = run_cspd(&target, &draft, &cond, 9, &off, &RandomSource::new(1)).unwrap();
    assert_eq!(m.early_stops, 0);
}

#[test]
fn checkpoint_preserves_forward_pass() {
    let (target, _) = toy_pair(8, 3, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("target.json");
    Checkpoint::from_toy(&target).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_toy().unwrap();
    assert_eq!(back, target);
    let ctx = vec![
        LatentToken::zeros(3),
        LatentToken::new(vec![0.5, -1.0, 2.0]).unwrap(),
    ];
    let cond = LatentToken::zeros(3);
    assert_eq!(
        back.forward(&ctx, &cond).unwrap(),
        target.forward(&ctx, &cond).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_accounting_holds(
        seed in 0u64..1000,
        gamma in 1usize..7,
        seq_len in 1usize..14,
        tau in 0.0f64..1.5,
        early_stop: bool,
        bonus: bool,
        kappa in 0.0f64..0.9,
        sharpen in 0.5f64..50.0,
    ) {
        let (target, draft) = toy_pair(seed, 2, sharpen);
        let cfg = SpecConfig {
            gamma,
            tau_ent: tau,
            early_stop,
            bonus_token: bonus,
            trajectory_coupling: kappa,
            ..Default::default()
        };
        let cond = LatentToken::new(vec![0.2, 0.1]).unwrap();
        let (out, m) = run_cspd(&target, &draft, &cond, seq_len, &cfg, &RandomSource::new(seed)).unwrap();
        prop_assert_eq!(out.len(), seq_len);
        prop_assert_eq!(m.tokens, seq_len);
        prop_assert_eq!(m.rounds.iter().map(|r| r.emitted).sum::<usize>(), seq_len);
        for r in &m.rounds {
            prop_assert_eq!(r.drafted, r.accepted + r.rejected + r.skipped);
            prop_assert!(r.drafted <= gamma);
            prop_assert!(r.rejected <= 1 || r.accepted + r.rejected <= gamma);
        }
        prop_assert!(m.accepted <= m.tested);
        if !early_stop {
            prop_assert_eq!(m.early_stops, 0);
        }
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..1000, gamma in 1usize..6) {
        let (target, draft) = toy_pair(seed % 7, 2, 3.0);
        let cfg = SpecConfig { gamma, tau_ent: 0.5, ..Default::default() };
        let cond = LatentToken::zeros(2);
        let a = run_cspd(&target, &draft, &cond, 10, &cfg, &RandomSource::new(seed)).unwrap();
        let b = run_cspd(&target, &draft, &cond, 10, &cfg, &RandomSource::new(seed)).unwrap();
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.1.trace_jsonl().unwrap(), b.1.trace_jsonl().unwrap());
    }

    #[test]
    fn identical_models_accept_every_draft(seed in 0u64..1000, gamma in 1usize..6, m in -2.0f64..2.0, v in 0.1f64..3.0) {
        let model = AnalyticGaussianModel::new(GaussianParams::new(vec![m], vec![v]).unwrap());
        let cfg = SpecConfig { gamma, ..Default::default() };
        let (_, metrics) = run_cspd(&model, &model, &LatentToken::zeros(1), 12, &cfg, &RandomSource::new(seed)).unwrap();
        prop_assert_eq!(metrics.accepted, metrics.tested);
        prop_assert_eq!(metrics.target_rounds, 12usize.div_ceil(gamma + 1));
    }
}
