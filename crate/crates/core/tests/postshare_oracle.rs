mod common;

use headshare_core::engine;
use headshare_core::postshare::{
    adam_step, combined_loss, postshare_train, sample_batch, task_train, tie_perturbation, weight_similarity_grad,
    weight_similarity_loss, weight_similarity_loss_with, PostShareConfig, RegNorm, RegOptions, TrainState,
};
use headshare_core::sharing::{direct_share_plan, SharePair, SharePlan};
use headshare_core::store::{attn_name, Dtype, TensorStore};
use headshare_core::{toy, HeadRef, MatchFunction, ModelConfig};

fn cfg() -> ModelConfig {
    ModelConfig {
        max_seq_len: 16,
        ..ModelConfig::new(3, 2, 8, 4, 8, 10)
    }
}

fn head_block(store: &TensorStore, cfg: &ModelConfig, h: HeadRef, proj: &str) -> Vec<f64> {
    common::match_vectors(store, cfg, h, &[proj])
}

/// Rows `[h·d_v, (h+1)·d_v)` of the fused output projection.
fn output_block(store: &TensorStore, cfg: &ModelConfig, h: HeadRef) -> Vec<f64> {
    let (data, cols) = common::raw(store, &attn_name(h.layer, "wo"));
    let dv = cfg.head_dim_v;
    (h.head * dv..(h.head + 1) * dv)
        .flat_map(|r| data[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn oracle_reg_full(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan, opts: RegOptions) -> f64 {
    let mut total = 0.0;
    for p in &plan.pairs {
        let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = ["wq", "wk", "wv"]
            .iter()
            .map(|proj| (head_block(store, cfg, p.keep, proj), head_block(store, cfg, p.replace, proj)))
            .collect();
        if opts.include_output {
            blocks.push((output_block(store, cfg, p.keep), output_block(store, cfg, p.replace)));
        }
        for (a, b) in blocks {
            let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
            total += match opts.norm {
                RegNorm::Frobenius => sq.sqrt(),
                RegNorm::Squared => sq,
            };
        }
    }
    total / plan.pairs.len() as f64
}

fn oracle_reg(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan) -> f64 {
    oracle_reg_full(store, cfg, plan, RegOptions::default())
}

const ALL_OPTIONS: [RegOptions; 4] = [
    RegOptions { norm: RegNorm::Frobenius, include_output: false },
    RegOptions { norm: RegNorm::Squared, include_output: false },
    RegOptions { norm: RegNorm::Frobenius, include_output: true },
    RegOptions { norm: RegNorm::Squared, include_output: true },
];

fn plan_for(store: &TensorStore, cfg: &ModelConfig) -> SharePlan {
    direct_share_plan(store, cfg, 0.5, MatchFunction::QKConcat, None).unwrap()
}

#[test]
fn reg_loss_matches_per_pair_oracle() {
    let cfg = cfg();
    for seed in 0..5 {
        let store = toy::random_store(&cfg, seed, Dtype::F64);
        let plan = plan_for(&store, &cfg);
        assert_eq!(plan.pairs.len(), 3);
        let got = weight_similarity_loss(&store, &cfg, &plan).unwrap();
        let want = oracle_reg(&store, &cfg, &plan);
        assert!((got - want).abs() < 1e-12 * want, "{got} vs {want}");
        assert!(got > 0.0);
        for opts in ALL_OPTIONS {
            let got = weight_similarity_loss_with(&store, &cfg, &plan, opts).unwrap();
            let want = oracle_reg_full(&store, &cfg, &plan, opts);
            assert!((got - want).abs() < 1e-12 * want, "{opts:?}: {got} vs {want}");
        }
    }
}

#[test]
fn reg_gradient_matches_central_differences() {
    let cfg = cfg();
    let eps = 1e-4;
    for seed in 0..5 {
        let store = toy::random_store(&cfg, 10 + seed, Dtype::F64);
        // Overlapping pairs so one head collects gradient from two terms.
        let plan = SharePlan {
            pairs: vec![
                SharePair { keep: HeadRef::new(0, 0), replace: HeadRef::new(1, 1) },
                SharePair { keep: HeadRef::new(1, 1), replace: HeadRef::new(2, 0) },
                SharePair { keep: HeadRef::new(0, 1), replace: HeadRef::new(2, 1) },
            ],
            ..SharePlan::empty(MatchFunction::QKConcat)
        };
        for opts in ALL_OPTIONS {
            let grad = weight_similarity_grad(&store, &cfg, &plan, opts).unwrap();
            for l in 0..cfg.num_layers {
                for proj in ["wq", "wk", "wv", "wo"] {
                    let name = attn_name(l, proj);
                    let analytic = grad.get(&name).unwrap().as_f64_slice().unwrap().to_vec();
                    let numeric = common::finite_difference(&store, &name, eps, |s| oracle_reg_full(s, &cfg, &plan, opts));
                    if proj == "wo" && !opts.include_output {
                        assert!(analytic.iter().chain(&numeric).all(|&v| v == 0.0));
                        continue;
                    }
                    let err = common::rel_err(&analytic, &numeric);
                    assert!(err < 1e-5, "seed {seed} {name} {opts:?}: {err:e}");
                }
            }
        }
    }
}

#[test]
fn combined_loss_is_task_plus_weighted_reg() {
    let cfg = cfg();
    let store = toy::random_store(&cfg, 3, Dtype::F64);
    let plan = plan_for(&store, &cfg);
    let corpus = toy::markov_corpus(&cfg, 4, 6, 8);
    let batch: Vec<_> = corpus.iter().map(|s| s.shifted().unwrap()).collect();
    let parts = combined_loss(&store, &cfg, &plan, &batch, 0.5).unwrap();
    let task: f64 = batch
        .iter()
        .map(|(x, t)| common::oracle_loss(&store, &cfg, x.ids(), t.ids()))
        .sum::<f64>()
        / batch.len() as f64;
    let reg = oracle_reg(&store, &cfg, &plan);
    assert!((parts.task - task).abs() < 1e-10);
    assert!((parts.reg - reg).abs() < 1e-12);
    assert!((parts.total - (task + 0.5 * reg)).abs() < 1e-10);
}

#[test]
fn zero_gamma_matches_plain_task_trainer() {
    let cfg = cfg();
    let store = toy::random_store(&cfg, 5, Dtype::F64);
    let plan = plan_for(&store, &cfg);
    let corpus = toy::markov_corpus(&cfg, 6, 20, 8);
    let pscfg = PostShareConfig {
        gamma: 0.0,
        learning_rate: 1e-2,
        steps: 15,
        batch_size: 4,
        seed: 77,
        ..Default::default()
    };
    let mut state = TrainState::new(&store);
    postshare_train(&mut state, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();

    let mut twin = TrainState::new(&store);
    let mut rng = toy::rng(77);
    for _ in 0..15 {
        let batch = sample_batch(&corpus, &mut rng, 4).unwrap();
        let w = engine::Weights::from_store(&twin.weights, &cfg).unwrap();
        let (_, g) = engine::batch_loss_and_grad(&w, &batch).unwrap();
        adam_step(&mut twin, &g.into_store(&cfg), &pscfg).unwrap();
    }
    assert_eq!(state.weights.to_bytes().unwrap(), twin.weights.to_bytes().unwrap());
}

#[test]
fn training_is_deterministic() {
    let cfg = cfg();
    let store = toy::random_store(&cfg, 5, Dtype::F64);
    let plan = plan_for(&store, &cfg);
    let corpus = toy::markov_corpus(&cfg, 6, 20, 8);
    let pscfg = PostShareConfig { gamma: 1.0, learning_rate: 1e-2, steps: 10, batch_size: 4, ..Default::default() };
    let run = || {
        let mut s = TrainState::new(&store);
        let log = postshare_train(&mut s, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();
        (s.weights.to_bytes().unwrap(), log)
    };
    assert_eq!(run(), run());
}

#[test]
fn large_gamma_shrinks_reg_loss() {
    let cfg = cfg();
    for seed in 0..3 {
        let store = toy::random_store(&cfg, 20 + seed, Dtype::F64);
        let plan = plan_for(&store, &cfg);
        let corpus = toy::markov_corpus(&cfg, 30 + seed, 32, 8);
        let pscfg = PostShareConfig {
            gamma: 1e3,
            learning_rate: 1e-2,
            steps: 200,
            batch_size: 4,
            seed,
            ..Default::default()
        };
        let start = weight_similarity_loss(&store, &cfg, &plan).unwrap();
        let mut state = TrainState::new(&store);
        postshare_train(&mut state, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();
        let end = weight_similarity_loss(&state.weights, &cfg, &plan).unwrap();
        assert!(end < start, "seed {seed}: {end} !< {start}");
    }
}

/// The trend check runs a grid over gamma at a fixed step budget, so the
/// task-driven drift of the (tied but unregularized) output projections is
/// comparable across grid points.
#[test]
fn tie_perturbation_shrinks_as_gamma_times_steps_grows() {
    let cfg = cfg();
    for seed in 0..3 {
        let store = toy::random_store(&cfg, 41 + seed, Dtype::F64);
        let plan = plan_for(&store, &cfg);
        let corpus = toy::markov_corpus(&cfg, 42 + seed, 32, 8);
        let probe = toy::random_sequences(&cfg, 43 + seed, 8, 8);
        let mut last = f64::INFINITY;
        for gamma in [0.0, 1.0, 10.0] {
            let pscfg = PostShareConfig { gamma, learning_rate: 1e-3, steps: 500, batch_size: 4, seed: 1, ..Default::default() };
            let mut state = TrainState::new(&store);
            postshare_train(&mut state, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();
            let delta = tie_perturbation(&state.weights, &cfg, &plan, &probe).unwrap();
            assert!(delta < last, "seed {seed} gamma {gamma}: {delta} !< {last}");
            last = delta;
        }
    }
}

#[test]
fn output_projection_reg_closes_the_tie_gap() {
    let cfg = cfg();
    let store = toy::random_store(&cfg, 41, Dtype::F64);
    let plan = plan_for(&store, &cfg);
    let corpus = toy::markov_corpus(&cfg, 42, 32, 8);
    let probe = toy::random_sequences(&cfg, 43, 8, 8);
    let run = |include_output| {
        let pscfg = PostShareConfig {
            gamma: 10.0,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 4,
            seed: 1,
            reg: RegOptions { include_output, ..Default::default() },
            ..Default::default()
        };
        let mut state = TrainState::new(&store);
        postshare_train(&mut state, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();
        tie_perturbation(&state.weights, &cfg, &plan, &probe).unwrap()
    };
    let (qkv, with_o) = (run(false), run(true));
    assert!(with_o < 0.1 * qkv, "{with_o} vs {qkv}");
}

#[test]
fn task_train_matches_zero_gamma_postshare() {
    let cfg = cfg();
    let store = toy::random_store(&cfg, 5, Dtype::F64);
    let plan = plan_for(&store, &cfg);
    let corpus = toy::markov_corpus(&cfg, 6, 20, 8);
    let pscfg = PostShareConfig { gamma: 0.0, learning_rate: 1e-2, steps: 12, batch_size: 4, ..Default::default() };
    let mut a = TrainState::new(&store);
    let mut b = TrainState::new(&store);
    let la = postshare_train(&mut a, &cfg, &plan, &corpus, &pscfg, |_| Ok(())).unwrap();
    let lb = task_train(&mut b, &cfg, &corpus, &pscfg, |_| Ok(())).unwrap();
    assert_eq!(a.weights, b.weights);
    assert!(la.iter().zip(&lb).all(|(x, y)| x.task == y.task && y.reg == 0.0));
    assert!(lb.last().unwrap().task < lb[0].task);
}
