//! Acceptance suite. One line per criterion, PASS or FAIL with the measured
//! quantity next to its pinned tolerance. The desk-scale learning criterion
//! needs tens of CPU-hours and lives in the ignored test at the bottom.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, Continuous};

use dreaming::ablate::{self, AblationMatrix, AblationTable};
use dreaming::agent::{self, Agent};
use dreaming::augment::{self, CropSpec};
use dreaming::behavior::{self, Behavior};
use dreaming::config::{DynamicsKind, Mode, Preset, TrainConfig};
use dreaming::contrastive::{self, Bilinear, LinearDynamics, Predictor};
use dreaming::diagnostics;
use dreaming::envs::{EnvConfig, Task};
use dreaming::latent::{self, GaussianParams, LatentState};
use dreaming::nn::ParamStore;
use dreaming::train::{self, read_metrics, TrainOptions, Trainer, METRICS_FILE};
use dreaming::world_model::WorldModel;

use common::Check;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

// 1. InfoNCE against a brute-force softmax cross-entropy.

fn brute_nce(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for (i, row) in m.iter().enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[i].exp() / z).ln();
    }
    total / n as f64
}

fn nce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=36);
        let scale = rng.random_range(0.1..8.0);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-scale..scale)).collect()).collect();
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        let got = contrastive::nce_loss(&tensor(flat, &[n, n])).map_err(e2s)?.to_scalar::<f64>().map_err(e2s)?;
        let want = brute_nce(&m);
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    ensure(worst < 1e-6, format!("max relative error {worst:.2e} >= 1e-6"))?;
    let uniform = contrastive::nce_loss(&Tensor::ones((4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap().to_scalar::<f64>().unwrap();
    ensure((uniform - 4f64.ln()).abs() < 1e-12, format!("uniform 4x4 gave {uniform}"))?;
    let eye = contrastive::nce_loss(&tensor(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap().to_scalar::<f64>().unwrap();
    let pinned = (1.0 + (-1.0f64).exp()).ln();
    ensure((eye - pinned).abs() < 1e-12, format!("identity 2x2 gave {eye}, want {pinned}"))?;
    Ok(format!("100 matrices, max rel err {worst:.1e} (tol 1e-6); log 4 and log(1+e^-1) pinned"))
}

// 2. Closed-form Gaussian KL against Monte Carlo.

/// Latin-hypercube Monte Carlo estimate of `E_q[log q(x) - log p(x)]`.
fn monte_carlo_kl(qm: &[f64], qs: &[f64], pm: &[f64], ps: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let q: Vec<Normal> = qm.iter().zip(qs).map(|(&m, &s)| Normal::new(m, s).unwrap()).collect();
    let p: Vec<Normal> = pm.iter().zip(ps).map(|(&m, &s)| Normal::new(m, s).unwrap()).collect();
    let d = qm.len();
    let strata: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            let mut v: Vec<usize> = (0..samples).collect();
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
            v
        })
        .collect();
    let mut total = 0.0;
    for i in 0..samples {
        for j in 0..d {
            let u = (strata[j][i] as f64 + rng.random::<f64>()) / samples as f64;
            let x = qm[j] + qs[j] * std_normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            total += q[j].ln_pdf(x) - p[j].ln_pdf(x);
        }
    }
    total / samples as f64
}

fn gaussian(mean: &[f64], std: &[f64]) -> GaussianParams {
    let d = mean.len();
    GaussianParams {
        mean: tensor(mean.to_vec(), &[1, d]),
        std: tensor(std.to_vec(), &[1, d]),
    }
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (qm, qs, pm, ps) = (draw(&mut rng, -1.0, 1.0), draw(&mut rng, 0.1, 2.0), draw(&mut rng, -1.0, 1.0), draw(&mut rng, 0.1, 2.0));
        let closed = latent::kl_divergence(&gaussian(&qm, &qs), &gaussian(&pm, &ps))
            .and_then(|t| Ok(t.sum_all()?.to_scalar::<f64>()?))
            .map_err(e2s)?;
        let mc = monte_carlo_kl(&qm, &qs, &pm, &ps, 100_000, &mut rng);
        worst = worst.max((closed - mc).abs());
    }
    ensure(worst < 1e-2, format!("max |closed - MC| {worst:.3e} >= 1e-2"))?;
    let q = gaussian(&[0.3, -0.2], &[0.5, 1.5]);
    let same = latent::kl_divergence(&q, &q).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    ensure(same == 0.0, format!("KL of identical Gaussians is {same}"))?;
    let half = latent::kl_divergence(&gaussian(&[0.0], &[1.0]), &gaussian(&[1.0], &[1.0])).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    ensure((half - 0.5).abs() < 1e-15, format!("KL[N(0,1)||N(1,1)] = {half}"))?;
    Ok(format!("50 pairs x 1e5 samples, max abs err {worst:.1e} (tol 1e-2); KL(q,q) = 0 exactly"))
}

// 3. Gradient checks against central differences.

const FD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const PER_GROUP: usize = 30;

fn grad_of(grads: &candle_core::backprop::GradStore, var: &candle_core::Var) -> Vec<f64> {
    match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        None => vec![0.0; var.elem_count()],
    }
}

fn model_groups() -> Vec<(&'static str, fn(&str) -> bool)> {
    vec![
        ("W_z", |n| n == "contrastive.linear.w_z"),
        ("W_a", |n| n.starts_with("contrastive.linear.w_a")),
        ("W_zx", |n| n == "contrastive.bilinear.w"),
        ("encoder", |n| n.starts_with("encoder.")),
        ("GRU", |n| n.starts_with("rssm.gru.")),
        ("prior/posterior heads", |n| n.starts_with("rssm.") && !n.starts_with("rssm.gru.")),
        ("reward head", |n| n.starts_with("reward.")),
    ]
}

/// Checks spread over the variables of one group.
fn check_group(
    store: &ParamStore,
    select: fn(&str) -> bool,
    grads: &candle_core::backprop::GradStore,
    rng: &mut ChaCha8Rng,
    loss: &mut dyn FnMut() -> f64,
) -> Vec<Check> {
    let vars: Vec<(String, candle_core::Var)> = store.named_vars().filter(|(n, _)| select(n)).map(|(n, v)| (n.clone(), v.clone())).collect();
    assert!(!vars.is_empty(), "empty parameter group");
    let mut out = Vec::new();
    for (i, (name, var)) in vars.iter().enumerate() {
        let count = PER_GROUP / vars.len() + usize::from(i < PER_GROUP % vars.len());
        if count == 0 {
            continue;
        }
        let g = grad_of(grads, var);
        out.extend(common::central_differences(name, var, &g, count, FD_EPS, rng, loss));
    }
    out
}

fn summarize(label: &str, checks: &[Check], report: &mut Vec<String>) -> usize {
    let worst = checks.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error())).unwrap();
    report.push(format!("{label}: {} checks, max rel {:.1e}", checks.len(), worst.rel_error()));
    for c in checks.iter().filter(|c| !(c.rel_error() < GRAD_TOL)) {
        println!("  gradient mismatch {}[{}]: analytic {:.6e}, numeric {:.6e}", c.param, c.index, c.analytic, c.numeric);
    }
    checks.iter().filter(|c| !(c.rel_error() < GRAD_TOL)).count()
}

fn gradient_checks() -> Outcome {
    let cfg = common::tiny_config();
    let agent = common::tiny_agent(&cfg, 303);
    let mut jitter = ChaCha8Rng::seed_from_u64(309);
    for store in agent.stores() {
        common::jitter_params(store, 0.05, &mut jitter);
    }
    let model = &agent.model;
    let inputs = common::batch_inputs(&cfg, 304);
    let k = cfg.objective.overshoot;
    let loss_seed = 305;
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let mut report = Vec::new();
    let mut failures = 0;
    let mut total = 0;

    // Overshooting KL targets are gradient-free for k >= 1, so the oracle
    // holds them at the unperturbed posterior.
    let frozen_targets = |model: &WorldModel| -> Vec<GaussianParams> {
        let filtered = model.observe(&inputs, &mut ChaCha8Rng::seed_from_u64(loss_seed)).unwrap();
        (0..=k)
            .map(|j| {
                let d: Vec<GaussianParams> = filtered.posts[j..].iter().map(|p| p.dist()).collect();
                GaussianParams::cat(&d.iter().collect::<Vec<_>>()).unwrap().detach()
            })
            .collect()
    };
    let q0 = frozen_targets(model);
    let mut model_loss = || -> f64 {
        let out = model.loss(&inputs, &mut ChaCha8Rng::seed_from_u64(loss_seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(loss_seed);
        let filtered = model.observe(&inputs, &mut rng).unwrap();
        let chains = latent::overshoot_chains(&model.rssm, &filtered, &inputs.actions, k, &mut rng).unwrap();
        let live = frozen_targets(model);
        let mut value = out.breakdown.total;
        for j in 1..=k {
            let fixed = latent::clamped_kl(&latent::kl_divergence(&q0[j], &chains[j]).unwrap(), 0.0).unwrap();
            let moving = latent::clamped_kl(&latent::kl_divergence(&live[j], &chains[j]).unwrap(), 0.0).unwrap();
            value += fixed.to_scalar::<f64>().unwrap() - moving.to_scalar::<f64>().unwrap();
        }
        value
    };
    let out = model.loss(&inputs, &mut ChaCha8Rng::seed_from_u64(loss_seed)).map_err(e2s)?;
    let grads = out.total.backward().map_err(e2s)?;
    for (label, select) in model_groups() {
        let checks = check_group(&model.store, select, &grads, &mut rng, &mut model_loss);
        total += checks.len();
        failures += summarize(label, &checks, &mut report);
    }

    // Behavior losses from detached posterior starts.
    let filtered = model.observe(&inputs, &mut ChaCha8Rng::seed_from_u64(loss_seed)).map_err(e2s)?;
    let start = LatentState::cat(&filtered.posts.iter().collect::<Vec<_>>()).map_err(e2s)?.detach();
    let beh = &agent.behavior;
    let beh_seed = 307;
    let mut actor_loss = || -> f64 {
        let l = beh.losses(&model.rssm, &model.reward, &start, &mut ChaCha8Rng::seed_from_u64(beh_seed)).unwrap();
        l.actor.to_scalar::<f64>().unwrap()
    };
    let losses = beh.losses(&model.rssm, &model.reward, &start, &mut ChaCha8Rng::seed_from_u64(beh_seed)).map_err(e2s)?;
    let grads = losses.actor.backward().map_err(e2s)?;
    let checks = check_group(&beh.actor_store, |_| true, &grads, &mut rng, &mut actor_loss);
    total += checks.len();
    failures += summarize("actor", &checks, &mut report);

    // The critic regresses onto gradient-free lambda-return targets.
    let traj = behavior::imagine(&model.rssm, &model.reward, &beh.actor, &start, beh.config.horizon, beh.config.gamma, &mut ChaCha8Rng::seed_from_u64(beh_seed)).map_err(e2s)?;
    let z = traj.z_stack().map_err(e2s)?;
    let (h1, n, dz) = z.dims3().map_err(e2s)?;
    let values = beh.critic.forward(&z.reshape((h1 * n, dz)).unwrap()).unwrap().reshape((h1, n)).unwrap();
    let targets = behavior::lambda_returns(&traj.rewards, &values, &traj.discounts, beh.config.lambda).map_err(e2s)?.detach();
    let weights = behavior::discount_weights(&traj.discounts).map_err(e2s)?;
    let z_in = z.narrow(0, 0, h1 - 1).unwrap().detach().reshape(((h1 - 1) * n, dz)).unwrap();
    let critic_of = || -> Tensor {
        let v = beh.critic.forward(&z_in).unwrap().reshape((h1 - 1, n)).unwrap();
        behavior::critic_loss(&v, &targets, &weights).unwrap()
    };
    let grads = critic_of().backward().map_err(e2s)?;
    let mut critic_loss = || critic_of().to_scalar::<f64>().unwrap();
    let checks = check_group(&beh.critic_store, |_| true, &grads, &mut rng, &mut critic_loss);
    total += checks.len();
    failures += summarize("critic", &checks, &mut report);

    let line = format!("{total} parameters, eps {FD_EPS:.0e}, tol {GRAD_TOL:.0e} [{}]", report.join("; "));
    ensure(total >= 200, format!("only {total} parameters checked"))?;
    ensure(failures == 0, format!("{failures} of {line}"))?;
    Ok(line)
}

// 4. Lambda-returns against the mixture of n-step returns.

/// `V(t) = sum_{n<L} (1-l) l^(n-1) G_n + l^(L-1) G_L` with `L = H - t`.
fn n_step_mixture(r: &[f64], v: &[f64], d: &[f64], lambda: f64) -> Vec<f64> {
    let h = r.len();
    let g = |t: usize, n: usize| -> f64 {
        let (mut acc, mut disc) = (0.0, 1.0);
        for i in 0..n {
            acc += disc * r[t + i];
            disc *= d[t + i];
        }
        acc + disc * v[t + n]
    };
    (0..h)
        .map(|t| {
            let l = h - t;
            let mut val = lambda.powi(l as i32 - 1) * g(t, l);
            for n in 1..l {
                val += (1.0 - lambda) * lambda.powi(n as i32 - 1) * g(t, n);
            }
            val
        })
        .collect()
}

fn lambda_column(h: usize, r: &[f64], v: &[f64], d: &[f64], lambda: f64) -> Result<Vec<f64>, String> {
    let out = behavior::lambda_returns(&tensor(r.to_vec(), &[h, 1]), &tensor(v.to_vec(), &[h + 1, 1]), &tensor(d.to_vec(), &[h, 1]), lambda).map_err(e2s)?;
    out.flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(e2s)
}

fn lambda_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..100 {
        let h = rng.random_range(1..=10);
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d: Vec<f64> = (0..h).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.8..1.0) }).collect();
        let lambda = rng.random_range(0.0..1.0);
        let got = lambda_column(h, &r, &v, &d, lambda)?;
        let want = n_step_mixture(&r, &v, &d, lambda);
        worst = got.iter().zip(&want).fold(worst, |w, (a, b)| w.max((a - b).abs()));

        let td: Vec<f64> = (0..h).map(|t| r[t] + d[t] * v[t + 1]).collect();
        exact &= lambda_column(h, &r, &v, &d, 0.0)? == td;
        let mut mc = vec![0.0; h];
        let mut next = v[h];
        for t in (0..h).rev() {
            mc[t] = r[t] + d[t] * next;
            next = mc[t];
        }
        exact &= lambda_column(h, &r, &v, &d, 1.0)? == mc;
    }
    ensure(worst < 1e-10, format!("max abs error {worst:.2e} >= 1e-10"))?;
    ensure(exact, "lambda in {0, 1} does not reduce exactly to TD(0) / discounted return")?;
    let hand = lambda_column(2, &[1.0, 1.0], &[0.5, 0.5, 0.5], &[0.9, 0.9], 0.95)?;
    ensure((hand[0] - 2.26225).abs() < 1e-12 && (hand[1] - 1.45).abs() < 1e-12, format!("hand case gave {hand:?}"))?;
    Ok(format!("100 instances, max abs err {worst:.1e} (tol 1e-10); lambda 0/1 exact; 2.26225/1.45 pinned"))
}

// 5. (B*K)^2 logit construction.

fn logit_shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (dh, ds, de, a) = (3usize, 2usize, 5usize, 2usize);
    let dz = dh + ds;
    let mut store = ParamStore::new(DType::F64);
    let linear = LinearDynamics::new(&mut store, dz, a, &mut rng).map_err(e2s)?;
    let bilinear = Bilinear::new(&mut store, dz, de, &mut rng).map_err(e2s)?;
    let normal = |rng: &mut ChaCha8Rng, shape: &[usize]| dreaming::nn::normal_tensor(rng, shape, DType::F64).unwrap();
    let mut cells = 0;
    for b in 1..=4 {
        for k in 1..=4 {
            let t = k + 1;
            let posts: Vec<LatentState> = (0..t)
                .map(|_| {
                    let mean = normal(&mut rng, &[b, ds]);
                    LatentState {
                        h: normal(&mut rng, &[b, dh]),
                        sample: mean.clone(),
                        std: Tensor::ones((b, ds), DType::F64, &Device::Cpu).unwrap(),
                        mean,
                    }
                })
                .collect();
            let actions = normal(&mut rng, &[b, t, a]);
            let targets = normal(&mut rng, &[b, t, de]);
            let logits = contrastive::build_logit_matrices(&posts, &actions, &targets, k, &Predictor::Linear(&linear), &bilinear, &mut rng).map_err(e2s)?;
            let dims = logits.dims().to_vec();
            ensure(dims == vec![1, b * k, b * k], format!("B={b} K={k}: logits {dims:?}"))?;
            ensure(logits.elem_count() == (b * k) * (b * k), "entry count")?;
            // every diagonal entry is the positive pair scored independently
            let m: Vec<Vec<f64>> = logits.squeeze(0).unwrap().to_vec2().unwrap();
            let z0 = posts[0].z().unwrap();
            for bi in 0..b {
                for ki in 1..=k {
                    let acts = actions.narrow(0, bi, 1).unwrap().narrow(1, 0, ki).unwrap();
                    let pred = linear.multi_step(&z0.narrow(0, bi, 1).unwrap(), &acts).unwrap();
                    let e = targets.narrow(0, bi, 1).unwrap().narrow(1, ki, 1).unwrap().squeeze(1).unwrap();
                    let want = bilinear.score(&pred, &e).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
                    let row = bi * k + ki - 1;
                    ensure((m[row][row] - want).abs() < 1e-10, format!("B={b} K={k}: diagonal {row} is not the positive pair"))?;
                }
            }
            cells += 1;
        }
    }
    Ok(format!("{cells} (B,K) cells: (B*K)^2 entries, B*K diagonal positives match independent scoring"))
}

// 6. Crop statistics.

fn chi_square_p(observed: &[f64], expected: &[f64], dof: f64) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

fn crop_statistics() -> Outcome {
    let draws = 10_000;
    let (mut online, mut target) = (ChaCha8Rng::seed_from_u64(606), ChaCha8Rng::seed_from_u64(607));
    let mut marg = [vec![0.0; 81], vec![0.0; 81]];
    let mut joint = vec![0.0; 81 * 81];
    let mut matches = 0usize;
    for _ in 0..draws {
        let a = augment::draw_crop_specs(1, &mut online)[0];
        let b = augment::draw_crop_specs(1, &mut target)[0];
        marg[0][a.cell()] += 1.0;
        marg[1][b.cell()] += 1.0;
        joint[a.cell() * 81 + b.cell()] += 1.0;
        matches += usize::from(a == b);
    }
    let flat = vec![draws as f64 / 81.0; 81];
    let p_online = chi_square_p(&marg[0], &flat, 80.0);
    let p_target = chi_square_p(&marg[1], &flat, 80.0);
    let expected: Vec<f64> = (0..81 * 81).map(|i| marg[0][i / 81] * marg[1][i % 81] / draws as f64).collect();
    let p_joint = chi_square_p(&joint, &expected, 6400.0);
    ensure(p_online > 0.01 && p_target > 0.01, format!("uniformity p-values {p_online:.3} / {p_target:.3}"))?;
    ensure(p_joint > 0.01, format!("independence p-value {p_joint:.3}"))?;
    let rate = matches as f64 / draws as f64;
    let sigma = ((1.0 / 81.0) * (80.0 / 81.0) / draws as f64).sqrt();
    ensure((rate - 1.0 / 81.0).abs() < 3.0 * sigma, format!("branch match rate {rate:.4}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(608);
    for _ in 0..20 {
        let src = Array5::from_shape_fn((2, 3, 72, 72, 3), |_| rng.random_range(-0.5f32..0.5));
        let (out, specs) = augment::random_crop(src.view(), &mut rng).map_err(e2s)?;
        ensure(out.shape() == [2, 3, 64, 64, 3], "crop output shape")?;
        for (b, spec) in specs.iter().enumerate() {
            let CropSpec { origin: (r, c) } = *spec;
            ensure(r <= 8 && c <= 8, "origin out of range")?;
            let window = src.slice(s![b, .., r..r + 64, c..c + 64, ..]);
            ensure(out.slice(s![b, .., .., .., ..]) == window, "crop is not an exact subwindow")?;
        }
    }
    Ok(format!("1e4 draws: uniform p = {p_online:.3}/{p_target:.3}, joint 81x81 p = {p_joint:.3}, match rate {rate:.4}; exact subwindows"))
}

// 7. Parameter-set disjointness.

fn mode_isolation() -> Outcome {
    let mut cfg = common::tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dreaming_model = WorldModel::new(&cfg, &mut rng).map_err(e2s)?;
    ensure(!dreaming_model.store.contains_prefix("decoder"), "dreaming mode owns decoder parameters")?;
    ensure(dreaming_model.decode(&Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap()).is_err(), "dreaming mode can decode")?;

    let inputs = common::batch_inputs(&cfg, 708);
    let out = dreaming_model.loss(&inputs, &mut rng).map_err(e2s)?;
    let grads = out.total.backward().map_err(e2s)?;
    let names: BTreeSet<String> = dreaming_model.store.names().into_iter().collect();
    let with_grad = dreaming_model.store.named_vars().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();

    let behavior = Behavior::new(&cfg.model, &cfg.behavior, 2, DType::F64, &mut rng).map_err(e2s)?;
    let start = LatentState::cat(&out.filtered.posts.iter().collect::<Vec<_>>()).map_err(e2s)?.detach();
    let losses = behavior.losses(&dreaming_model.rssm, &dreaming_model.reward, &start, &mut rng).map_err(e2s)?;
    for (label, loss) in [("actor", &losses.actor), ("critic", &losses.critic)] {
        let g = loss.backward().map_err(e2s)?;
        for (name, var) in dreaming_model.store.named_vars() {
            if name.starts_with("contrastive.") {
                ensure(g.get(var.as_tensor()).is_none(), format!("{label} loss reaches {name}"))?;
            }
        }
    }
    for store in [&behavior.actor_store, &behavior.critic_store] {
        ensure(store.names().iter().all(|n| !names.contains(n)), "behavior and model stores share names")?;
        let ids: std::collections::HashSet<_> = dreaming_model.store.vars().iter().map(|v| v.as_tensor().id()).collect();
        ensure(store.vars().iter().all(|v| !ids.contains(&v.as_tensor().id())), "behavior and model stores share variables")?;
    }

    cfg.objective.mode = Mode::DreamerRecon;
    let recon = WorldModel::new(&cfg, &mut rng).map_err(e2s)?;
    ensure(!recon.store.contains_prefix("contrastive"), "reconstruction mode owns contrastive parameters")?;
    ensure(recon.store.contains_prefix("decoder"), "reconstruction mode lacks a decoder")?;
    cfg.objective.mode = Mode::Dreaming;
    cfg.objective.dynamics = DynamicsKind::Shared;
    let shared = WorldModel::new(&cfg, &mut rng).map_err(e2s)?;
    ensure(!shared.store.contains_prefix("contrastive.linear"), "shared dynamics builds linear dynamics")?;
    Ok(format!(
        "dreaming graph: {with_grad}/{} params, no decoder; actor/critic gradients reach no linear-dynamics or bilinear params; recon has no contrastive params",
        names.len()
    ))
}

// 9. Ablation matrix at smoke scale.

fn ablation_matrix() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let base = TrainConfig::preset(Preset::Smoke);
    let matrix = AblationMatrix {
        grad_steps: Some(500),
        eval_episodes: Some(2),
        ..AblationMatrix::default()
    };
    let started = Instant::now();
    let table = ablate::run(&base, &matrix, dir.path()).map_err(e2s)?;
    let cells = matrix.cells().len() * matrix.seeds.len();
    ensure(cells == 32 && table.results.len() == cells, format!("{} of {cells} cells", table.results.len()))?;
    let mut seen = BTreeSet::new();
    for r in &table.results {
        ensure(r.grad_steps == 500, format!("{} {} K{}: {} steps", r.dynamics, r.augment, r.k, r.grad_steps))?;
        ensure(r.eval_return.is_finite() && r.total_loss.is_finite() && r.nce_total.is_finite(), "non-finite table entry")?;
        seen.insert((r.dynamics.clone(), r.augment.clone(), r.k));
    }
    ensure(seen.len() == 32, "duplicate cells")?;
    let json: AblationTable = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).map_err(e2s)?).map_err(e2s)?;
    ensure(json == table, "ablation.json does not round-trip")?;
    let text = std::fs::read_to_string(dir.path().join("ablation.txt")).map_err(e2s)?;
    ensure(text == ablate::format_table(&table), "ablation.txt differs from the table")?;
    for header in ["predictive dynamics", "augmentation", "overshooting distance", "all cells", "K=1", "K=7", "crop+jitter", "shared"] {
        ensure(text.contains(header), format!("table lacks '{header}'"))?;
    }
    println!("{text}");
    Ok(format!("32 cells x 500 steps in {:.0}s; json round-trips, text table complete", started.elapsed().as_secs_f64()))
}

// 10. Determinism and checkpoint round trip.

fn determinism() -> Outcome {
    let mut cfg = TrainConfig::preset(Preset::Smoke);
    cfg.schedule.max_grad_steps = Some(60);
    cfg.schedule.train_steps_per_episode = 30;
    cfg.schedule.log_every = 10;
    let dirs = [tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?];
    let mut streams = Vec::new();
    let mut last = None;
    for dir in &dirs {
        cfg.run.outdir = dir.path().to_path_buf();
        let mut trainer = Trainer::new(&cfg, &TrainOptions::default()).map_err(e2s)?;
        let summary = trainer.run().map_err(e2s)?;
        streams.push(std::fs::read(dir.path().join(METRICS_FILE)).map_err(e2s)?);
        last = Some((trainer, summary));
    }
    ensure(!streams[0].is_empty() && streams[0] == streams[1], "metrics streams differ between identical runs")?;
    let records = read_metrics(&dirs[0].path().join(METRICS_FILE)).map_err(e2s)?;

    let (trainer, summary) = last.unwrap();
    let ckpt = summary.checkpoints.last().ok_or("no checkpoint written")?.clone();
    let before = trainer.agent.evaluate(3).map_err(e2s)?;
    let (loaded, manifest) = Agent::load(&ckpt).map_err(e2s)?;
    let after = loaded.evaluate(3).map_err(e2s)?;
    ensure(before.returns == after.returns, format!("evaluation changed across save/load: {:?} vs {:?}", before.returns, after.returns))?;
    for (a, b) in trainer.agent.stores().iter().zip(loaded.stores().iter()) {
        ensure(a.checksum().map_err(e2s)? == b.checksum().map_err(e2s)?, "parameters changed across save/load")?;
    }
    ensure(manifest.step == summary.grad_steps, "manifest step")?;
    Ok(format!("{} identical metric records over 2 runs; save/load/evaluate bit-exact (returns {:?})", records.len(), after.returns))
}

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { id: 1, name: "InfoNCE oracle", run: nce_oracle },
        Criterion { id: 2, name: "Gaussian KL oracle", run: kl_oracle },
        Criterion { id: 3, name: "gradient checks", run: gradient_checks },
        Criterion { id: 4, name: "lambda-return oracle", run: lambda_oracle },
        Criterion { id: 5, name: "logit-matrix shape law", run: logit_shape_law },
        Criterion { id: 6, name: "augmentation statistics", run: crop_statistics },
        Criterion { id: 7, name: "mode isolation", run: mode_isolation },
        Criterion { id: 9, name: "ablation matrix", run: ablation_matrix },
        Criterion { id: 10, name: "determinism and checkpoint round trip", run: determinism },
    ];
    let mut lines = BTreeMap::new();
    let mut failed = Vec::new();
    for c in &criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("[PASS] criterion {:>2} {}: {detail} ({secs:.1}s)", c.id, c.name),
            Err(why) => {
                failed.push(c.id);
                format!("[FAIL] criterion {:>2} {}: {why} ({secs:.1}s)", c.id, c.name)
            }
        };
        println!("{line}");
        lines.insert(c.id, line);
    }
    lines.insert(
        8,
        "[NOT RUN] criterion  8 desk-scale learning: about 45 CPU-hours on one core; run `cargo test --release -p dreaming --test acceptance -- --ignored desk_scale_learning`".into(),
    );
    println!("\nacceptance summary");
    for line in lines.values() {
        println!("{line}");
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}

// 8. Desk-scale learning analog.

fn desk_config(mode: Mode, seed: u64, outdir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::preset(Preset::Desk);
    cfg.task = EnvConfig {
        task: Task::DotReach,
        target_radius_px: 2,
        ..EnvConfig::default()
    };
    cfg.objective.mode = mode;
    cfg.schedule.total_env_steps = 30_000;
    cfg.run.seed = seed;
    cfg.run.outdir = outdir.join(format!("{}_seed{seed}", mode.as_str()));
    cfg
}

fn target_probe(agent: &Agent, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<_> = (0..20).map(|i| agent::random_episode(&agent.config.task, 5_000_000 + seed * 100 + i, &mut rng).unwrap()).collect();
    let (x, y) = diagnostics::collect_latents(&agent.model, &episodes).unwrap();
    diagnostics::linear_probe(&x, &y, agent.config.objective.mode.as_str()).unwrap().mean_r2(&[2, 3])
}

#[test]
#[ignore = "desk-scale learning run, tens of CPU-hours"]
fn desk_scale_learning() {
    let root = std::env::var_os("DREAMING_OUTDIR").map(std::path::PathBuf::from).unwrap_or_else(|| "runs/acceptance_desk".into());
    let baseline = agent::random_baseline(&desk_config(Mode::Dreaming, 0, &root).task, 100, 0).unwrap();
    let mut wins = [0usize; 3];
    for seed in 0..3u64 {
        let mut results = Vec::new();
        for mode in [Mode::Dreaming, Mode::DreamerRecon] {
            let cfg = desk_config(mode, seed, &root);
            let summary = train::train(&cfg, &TrainOptions::default()).unwrap();
            let (agent, _) = Agent::load(summary.checkpoints.last().unwrap()).unwrap();
            let r2 = target_probe(&agent, seed);
            results.push((summary.final_eval.mean, r2));
        }
        let ((ret_d, r2_d), (ret_r, r2_r)) = (results[0], results[1]);
        let checks = [ret_d >= 5.0 * baseline.mean, ret_d > ret_r, r2_d - r2_r >= 0.1];
        for (w, ok) in wins.iter_mut().zip(checks) {
            *w += usize::from(ok);
        }
        println!(
            "seed {seed}: dreaming {ret_d:.2} (target R2 {r2_d:.3}), reconstruction {ret_r:.2} (target R2 {r2_r:.3}), random {:.2}; (a,b,c) = {checks:?}",
            baseline.mean
        );
    }
    println!("seeds satisfying (a) >= 5x random: {}/3, (b) beats reconstruction: {}/3, (c) probe margin >= 0.1: {}/3", wins[0], wins[1], wins[2]);
    assert!(wins.iter().all(|&w| w >= 2), "desk-scale criterion needs 2 of 3 seeds per inequality: {wins:?}");
}
