//! Sparse mixture-of-experts layer.
//!
//! A linear router maps each token to expert logits; the softmax gives the
//! assignment probabilities `P(x)`. Each token is processed only by its
//! top-K experts and the outputs are combined with the selected
//! probabilities, optionally renormalized to sum to one. Experts are either
//! initialized independently or replicated from a dense feed-forward
//! network; in the second case, with renormalization, a freshly converted
//! layer computes exactly what the donor did.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_rows, topk_indices, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Rescale the K selected probabilities to sum to one.
    pub renormalize_topk: bool,
    /// Std of the router's Gaussian init; 0 gives uniform initial routing.
    pub router_init_std: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            num_experts: 8,
            top_k: 4,
            renormalize_topk: true,
            router_init_std: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "mixture of experts needs 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.router_init_std >= 0.0 && self.router_init_std.is_finite()) {
            return Err(Error::Config(format!("router_init_std must be >= 0, got {}", self.router_init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// Router weight, D × E. No bias.
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub cfg: MoeConfig,
}

/// Per-token routing: full probability row, chosen experts and their
/// combination weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// T × E.
    pub probs: Tensor,
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Router statistics over a batch: hard argmax counts and summed
/// probabilities per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadStats {
    pub counts: Vec<usize>,
    pub prob_sums: Vec<f64>,
    pub tokens: usize,
}

impl LoadStats {
    pub fn empty(num_experts: usize) -> Self {
        LoadStats {
            counts: vec![0; num_experts],
            prob_sums: vec![0.0; num_experts],
            tokens: 0,
        }
    }

    pub fn from_probs(probs: &Tensor) -> Self {
        let e = probs.cols();
        let mut stats = LoadStats::empty(e);
        for t in 0..probs.rows() {
            let row = probs.row(t);
            stats.counts[argmax(row)] += 1;
            for (s, p) in stats.prob_sums.iter_mut().zip(row) {
                *s += p;
            }
            stats.tokens += 1;
        }
        stats
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Folds another batch slice into this one.
    pub fn merge(&mut self, other: &LoadStats) {
        assert_eq!(self.counts.len(), other.counts.len(), "merging stats of different expert counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
    }

    /// Fraction of tokens whose highest-probability expert is `i`.
    pub fn fractions(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Mean routing probability of each expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.prob_sums.iter().map(|&s| s / t).collect()
    }
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `E · Σ_i F_i · G_i`.
pub fn aux_loss_from_fractions(fractions: &[f64], mean_probs: &[f64]) -> f64 {
    let e = fractions.len() as f64;
    e * fractions.iter().zip(mean_probs).map(|(f, g)| f * g).sum::<f64>()
}

pub fn aux_loss(stats: &LoadStats) -> f64 {
    aux_loss_from_fractions(&stats.fractions(), &stats.mean_probs())
}

/// Differentiable share of the load-balancing loss contributed by the
/// tokens in `probs`: `(E / T_batch) · Σ_t Σ_i F_i · P_t,i`. Summed over
/// all slices of a batch this equals `E · Σ F_i G_i`. `F` is held constant,
/// so the gradient flows only through the probabilities.
pub fn aux_loss_term(tape: &mut Tape, probs: Var, fractions: &[f64], batch_tokens: usize) -> Result<Var> {
    let e = fractions.len();
    if tape.shape(probs)[1] != e {
        return Err(Error::shape("aux_loss_term", tape.shape(probs), &[e]));
    }
    let f = tape.constant(Tensor::new(vec![e], fractions.to_vec())?);
    let weighted = tape.mul_row(probs, f)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, e as f64 / batch_tokens.max(1) as f64))
}

/// Router probabilities and top-K selection for plain (untracked) inputs.
pub fn route_tokens(x: &Tensor, router: &Tensor, cfg: &MoeConfig) -> Result<RoutingDecision> {
    cfg.validate()?;
    let logits = crate::tensor::matmul(x, router)?;
    if logits.cols() != cfg.num_experts {
        return Err(Error::shape("route_tokens", router.shape(), &[x.cols(), cfg.num_experts]));
    }
    Ok(decide(softmax_rows(&logits), cfg))
}

fn decide(probs: Tensor, cfg: &MoeConfig) -> RoutingDecision {
    let mut indices = Vec::with_capacity(probs.rows());
    let mut weights = Vec::with_capacity(probs.rows());
    for t in 0..probs.rows() {
        let row = probs.row(t);
        let idx = topk_indices(row, cfg.top_k).expect("validated top_k");
        let mut w: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
        if cfg.renormalize_topk {
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
        }
        indices.push(idx);
        weights.push(w);
    }
    RoutingDecision { probs, indices, weights }
}

/// Result of one MoE forward pass.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Var,
    /// Router probabilities on the tape (T × E), for the auxiliary loss.
    pub probs: Var,
    pub routing: RoutingDecision,
    pub stats: LoadStats,
    /// Number of token rows each expert evaluated.
    pub expert_calls: Vec<usize>,
}

impl MoeOutput {
    pub fn total_expert_calls(&self) -> usize {
        self.expert_calls.iter().sum()
    }
}

impl MoeLayer {
    /// A layer whose experts are all copies of `donor` (whose tensors live
    /// in `donor_store`). The router is zero unless `cfg.router_init_std` is
    /// positive.
    pub fn init_from_dense<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        donor_store: &ParamStore,
        donor: &FeedForward,
        cfg: MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let width = donor.width(donor_store);
        let experts = (0..cfg.num_experts)
            .map(|i| donor.copy_into(donor_store, store, &format!("{name}.experts.{i}")))
            .collect();
        let router = store.normal(format!("{name}.router"), &[width, cfg.num_experts], cfg.router_init_std, rng);
        Ok(MoeLayer { router, experts, cfg })
    }

    /// A layer with independently initialized experts.
    pub fn new_random<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        inner: usize,
        cfg: MoeConfig,
        activation: crate::nn::Activation,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.num_experts)
            .map(|i| FeedForward::new(store, &format!("{name}.experts.{i}"), width, inner, activation, rng))
            .collect();
        let router = store.normal(format!("{name}.router"), &[width, cfg.num_experts], cfg.router_init_std, rng);
        Ok(MoeLayer { router, experts, cfg })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.router];
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids
    }

    /// `MoE(x)_t = Σ_{i ∈ topK(t)} w_t,i · e_i(x_t)`. Only selected experts
    /// run, each on the rows routed to it.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<MoeOutput> {
        let cfg = &self.cfg;
        let t_len = tape.shape(x)[0];
        let w = tape.param(store, self.router);
        let logits = tape.matmul(x, w)?;
        let probs = tape.softmax_rows(logits);
        let routing = decide(tape.value(probs).clone(), cfg);
        let stats = LoadStats::from_probs(&routing.probs);

        let k = cfg.top_k;
        let picks: Vec<(usize, usize)> = routing
            .indices
            .iter()
            .enumerate()
            .flat_map(|(t, idx)| idx.iter().map(move |&e| (t, e)))
            .collect();
        let selected = tape.gather_elements(probs, &picks)?;
        let selected = tape.reshape(selected, &[t_len, k])?;
        let weights = if cfg.renormalize_topk {
            tape.normalize_rows(selected)?
        } else {
            selected
        };

        let mut expert_calls = vec![0; cfg.num_experts];
        let mut parts = Vec::with_capacity(cfg.num_experts);
        for (e, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (t, idx) in routing.indices.iter().enumerate() {
                if let Some(slot) = idx.iter().position(|&i| i == e) {
                    rows.push(t);
                    slots.push((t, slot));
                }
            }
            if rows.is_empty() {
                continue;
            }
            expert_calls[e] = rows.len();
            let xe = tape.gather_rows(x, &rows)?;
            let ye = expert.forward(store, tape, xe)?;
            let we = tape.gather_elements(weights, &slots)?;
            let ye = tape.mul_col(ye, we)?;
            parts.push(tape.scatter_rows(ye, &rows, t_len)?);
        }
        let y = tape.add_n(&parts)?;
        Ok(MoeOutput {
            y,
            probs,
            routing,
            stats,
            expert_calls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::nn::Activation;
    use crate::params::GradBuffer;
    use crate::tensor::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn donor(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> FeedForward {
        let ffn = FeedForward::new(store, "donor", d, 4 * d, Activation::Silu, rng);
        // Nonzero biases so copies are exercised fully.
        for id in [ffn.up.bias, ffn.down.bias] {
            let n = store.get(id).numel();
            let t = random(1, n, rng).reshape(vec![n]).unwrap();
            store.set(id, t).unwrap();
        }
        ffn
    }

    fn replicate(store: &mut ParamStore, name: &str, ffn: &FeedForward, cfg: MoeConfig, rng: &mut ChaCha8Rng) -> Result<MoeLayer> {
        let donor_store = store.clone();
        MoeLayer::init_from_dense(store, name, &donor_store, ffn, cfg, rng)
    }

    fn dense(store: &ParamStore, ffn: &FeedForward, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = ffn.forward(store, &mut tape, xv).unwrap();
        tape.value(y).clone()
    }

    fn moe(store: &ParamStore, layer: &MoeLayer, x: &Tensor) -> (Tensor, MoeOutput) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = layer.forward(store, &mut tape, xv).unwrap();
        (tape.value(out.y).clone(), out)
    }

    fn rel_close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn zero_router_is_uniform_with_lowest_index_ties() {
        let x = Tensor::full(&[3, 4], 0.7);
        let w = Tensor::zeros(&[4, 8]);
        let r = route_tokens(&x, &w, &MoeConfig::default()).unwrap();
        assert!(r.probs.data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
        assert!(r.indices.iter().all(|i| i == &vec![0, 1, 2, 3]));
    }

    #[test]
    fn two_expert_closed_form() {
        // x = [1], W = [0, ln 3] gives logits (0, ln 3).
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let raw = MoeConfig { num_experts: 2, top_k: 1, renormalize_topk: false, ..MoeConfig::default() };
        let r = route_tokens(&x, &w, &raw).unwrap();
        assert!((r.probs.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((r.probs.get(0, 1) - 0.75).abs() < 1e-12);
        assert_eq!(r.indices[0], vec![1]);
        assert!((r.weights[0][0] - 0.75).abs() < 1e-12);
        let renorm = MoeConfig { renormalize_topk: true, ..raw };
        let r = route_tokens(&x, &w, &renorm).unwrap();
        assert_eq!(r.weights[0], vec![1.0]);
    }

    #[test]
    fn routing_ignores_constant_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, 5, &mut rng);
        let w = random(5, 8, &mut rng);
        // Append a constant-1 feature whose router row adds c to every logit.
        let mut x1 = Vec::new();
        for t in 0..6 {
            x1.extend_from_slice(x.row(t));
            x1.push(1.0);
        }
        let x1 = Tensor::new(vec![6, 6], x1).unwrap();
        let mut w1 = w.data().to_vec();
        w1.extend(std::iter::repeat_n(2.5, 8));
        let w1 = Tensor::new(vec![6, 8], w1).unwrap();
        let cfg = MoeConfig::default();
        let a = route_tokens(&x, &w, &cfg).unwrap();
        let b = route_tokens(&x1, &w1, &cfg).unwrap();
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-12);
        assert_eq!(a.indices, b.indices);
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (p, q) in wa.iter().zip(wb) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_ensemble_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ffn = donor(&mut store, 6, &mut rng);
        for renormalize_topk in [false, true] {
            let cfg = MoeConfig { num_experts: 8, top_k: 8, renormalize_topk, router_init_std: 0.3 };
            let layer = replicate(&mut store, &format!("moe{renormalize_topk}"), &ffn, cfg, &mut rng).unwrap();
            let x = random(5, 6, &mut rng);
            let (y, _) = moe(&store, &layer, &x);
            assert!(rel_close(&y, &dense(&store, &ffn, &x), 1e-12));
        }
    }

    #[test]
    fn literal_top4_of_uniform_halves_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ffn = donor(&mut store, 6, &mut rng);
        let raw = MoeConfig { renormalize_topk: false, ..MoeConfig::default() };
        let layer = replicate(&mut store, "raw", &ffn, raw, &mut rng).unwrap();
        let x = random(7, 6, &mut rng);
        let (y, _) = moe(&store, &layer, &x);
        let half: Vec<f64> = dense(&store, &ffn, &x).data().iter().map(|v| 0.5 * v).collect();
        let half = Tensor::new(y.shape().to_vec(), half).unwrap();
        assert!(rel_close(&y, &half, 1e-12));

        let layer = replicate(&mut store, "renorm", &ffn, MoeConfig::default(), &mut rng).unwrap();
        let (y, _) = moe(&store, &layer, &x);
        assert!(rel_close(&y, &dense(&store, &ffn, &x), 1e-12));
    }

    #[test]
    fn init_copies_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ffn = donor(&mut store, 5, &mut rng);
        let layer = replicate(&mut store, "moe", &ffn, MoeConfig::default(), &mut rng).unwrap();
        assert!(store.get(layer.router).data().iter().all(|&v| v == 0.0));
        for expert in &layer.experts {
            for (a, b) in expert.param_ids().iter().zip(ffn.param_ids()) {
                assert_eq!(store.get(*a), store.get(b));
            }
            let x = random(4, 5, &mut rng);
            assert_eq!(dense(&store, expert, &x), dense(&store, &ffn, &x));
        }
    }

    #[test]
    fn identity_at_init_on_100_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ffn = donor(&mut store, 8, &mut rng);
        let layer = replicate(&mut store, "moe", &ffn, MoeConfig::default(), &mut rng).unwrap();
        for _ in 0..100 {
            let x = random(3, 8, &mut rng);
            let (y, _) = moe(&store, &layer, &x);
            assert!(y.max_abs_diff(&dense(&store, &ffn, &x)) <= 1e-12);
        }
    }

    #[test]
    fn exactly_k_expert_rows_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = MoeConfig { router_init_std: 1.0, ..MoeConfig::default() };
        let layer = MoeLayer::new_random(&mut store, "moe", 6, 12, cfg, Activation::Silu, &mut rng).unwrap();
        for t in [1, 5, 17] {
            let x = random(t, 6, &mut rng);
            let (_, out) = moe(&store, &layer, &x);
            assert_eq!(out.total_expert_calls(), cfg.top_k * t);
        }
    }

    #[test]
    fn permuting_experts_and_router_columns_preserves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = MoeConfig { router_init_std: 1.0, ..MoeConfig::default() };
        let layer = MoeLayer::new_random(&mut store, "moe", 6, 12, cfg, Activation::Silu, &mut rng).unwrap();
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let w = store.get(layer.router).clone();
        let mut wp = Tensor::zeros(w.shape());
        for r in 0..w.rows() {
            for (new, &old) in perm.iter().enumerate() {
                wp.data_mut()[r * 8 + new] = w.get(r, old);
            }
        }
        let router = store.insert("permuted.router", wp);
        let permuted = MoeLayer {
            router,
            experts: perm.iter().map(|&old| layer.experts[old].clone()).collect(),
            cfg,
        };
        let x = random(9, 6, &mut rng);
        let (a, oa) = moe(&store, &layer, &x);
        let (b, ob) = moe(&store, &permuted, &x);
        assert!(a.max_abs_diff(&b) <= 1e-12);
        for (ia, ib) in oa.routing.indices.iter().zip(&ob.routing.indices) {
            let mapped: Vec<usize> = ib.iter().map(|&i| perm[i]).collect();
            assert_eq!(ia, &mapped);
        }
    }

    #[test]
    fn aux_closed_forms() {
        let e = 8;
        let uniform = vec![1.0 / e as f64; e];
        assert!((aux_loss_from_fractions(&uniform, &uniform) - 1.0).abs() < 1e-12);
        let mut onehot = vec![0.0; e];
        onehot[3] = 1.0;
        assert_eq!(aux_loss_from_fractions(&onehot, &onehot), 8.0);

        let probs = Tensor::from_rows(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap();
        let stats = LoadStats::from_probs(&probs);
        assert_eq!(stats.fractions(), vec![1.0, 0.0]);
        let g = stats.mean_probs();
        assert!((g[0] - 0.7).abs() < 1e-15 && (g[1] - 0.3).abs() < 1e-15);
        assert!((aux_loss(&stats) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn aux_is_at_least_one_when_f_equals_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let e = rng.random_range(1..10);
            let raw: Vec<f64> = (0..e).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let f: Vec<f64> = raw.iter().map(|v| v / s).collect();
            assert!(aux_loss_from_fractions(&f, &f) >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn load_stats_sum_to_one_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = softmax_rows(&random(5, 8, &mut rng));
        let b = softmax_rows(&random(3, 8, &mut rng));
        let mut stats = LoadStats::from_probs(&a);
        stats.merge(&LoadStats::from_probs(&b));
        assert_eq!(stats.tokens, 8);
        assert!((stats.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((stats.mean_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aux_term_matches_closed_form_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let logits = store.insert("logits", random(6, 4, &mut rng));
        let eval = |s: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let l = tape.param(s, logits);
            let p = tape.softmax_rows(l);
            let stats = LoadStats::from_probs(tape.value(p));
            aux_loss_term(tape, p, &stats.fractions(), stats.tokens)
        };
        let mut tape = Tape::new();
        let l = eval(&store, &mut tape).unwrap();
        let expected = aux_loss(&LoadStats::from_probs(&softmax_rows(store.get(logits))));
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
        tape.backward(l).unwrap();
        let mut buf = GradBuffer::new(&store);
        for (id, g) in tape.take_param_grads() {
            buf.accumulate(id, &g);
        }
        let checks = check_params(&store, &[logits], &buf, 1e-6, |s| {
            let mut t = Tape::new();
            let l = eval(s, &mut t)?;
            t.value(l).item()
        })
        .unwrap();
        assert!(checks[0].rel_err < 1e-6, "{}", checks[0].rel_err);
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = MoeConfig { num_experts: 4, top_k: 2, renormalize_topk: true, router_init_std: 1.0 };
        let layer = MoeLayer::new_random(&mut store, "moe", 4, 6, cfg, Activation::Silu, &mut rng).unwrap();
        let x = random(5, 4, &mut rng);
        let probe = random(5, 4, &mut rng);
        let eval = |s: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let out = layer.forward(s, tape, xv)?;
            let p = tape.constant(probe.clone());
            let m = tape.mul(out.y, p)?;
            Ok(tape.sum(m))
        };
        let mut tape = Tape::new();
        let l = eval(&store, &mut tape).unwrap();
        tape.backward(l).unwrap();
        let mut buf = GradBuffer::new(&store);
        for (id, g) in tape.take_param_grads() {
            buf.accumulate(id, &g);
        }
        let ids = layer.param_ids();
        let checks = check_params(&store, &ids, &buf, 1e-6, |s| {
            let mut t = Tape::new();
            let l = eval(s, &mut t)?;
            t.value(l).item()
        })
        .unwrap();
        for c in checks {
            assert!(c.rel_err < 1e-6, "{}: {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn one_training_step_separates_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ffn = donor(&mut store, 6, &mut rng);
        let cfg = MoeConfig { router_init_std: 1.0, ..MoeConfig::default() };
        let layer = replicate(&mut store, "moe", &ffn, cfg, &mut rng).unwrap();
        let x = random(12, 6, &mut rng);
        let target = random(12, 6, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = layer.forward(&store, &mut tape, xv).unwrap();
        let tv = tape.constant(target);
        let diff = tape.sub(out.y, tv).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&store);
        for (id, g) in tape.take_param_grads() {
            buf.accumulate(id, &g);
        }
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, &buf, 1e-2).unwrap();
        let w = |i: usize| store.get(layer.experts[i].down.weight).clone();
        let distinct = (1..8).filter(|&i| w(i) != w(0)).count();
        assert!(distinct > 0, "experts still identical after a step");
    }

    #[test]
    fn invalid_configs() {
        assert!(MoeConfig { top_k: 0, ..MoeConfig::default() }.validate().is_err());
        assert!(MoeConfig { top_k: 9, ..MoeConfig::default() }.validate().is_err());
        assert!(MoeConfig::default().validate().is_ok());
    }
}
