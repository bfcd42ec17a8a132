//! Structure-aware pointer decoder.
//!
//! For a prediction point with annotated state `s` and context tokens `x_j`
//! with roles `r_j`:
//!
//! ```text
//! a_j   = softmax_j(attn[s, r_j])
//! c[v]  = sum_j a_j [x_j = v]
//! z[v]  = bias[v] + gen[s, v] + gate[s] * ln(EPS + c[v])
//! p     = softmax(z / T)
//! ```
//!
//! State and role ids are folded into `state_buckets` / `role_buckets`
//! (id modulo bucket count), which lets tiny shapes exercise every code path.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::categorical::Categorical;
use super::features::{Annotation, N_ROLES, N_STATES};
use crate::error::{Error, Result};
use crate::vocab::{Markers, TokenId};

pub const COPY_EPS: f64 = 1e-2;
pub const DEFAULT_WINDOW: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab: usize,
    pub state_buckets: usize,
    pub role_buckets: usize,
    pub window: usize,
}

impl PolicyShape {
    /// One bucket per annotated state and role.
    pub fn full(vocab: usize) -> Self {
        Self {
            vocab,
            state_buckets: N_STATES,
            role_buckets: N_ROLES,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn n_params(&self) -> usize {
        self.vocab + self.state_buckets * self.vocab + self.state_buckets + self.state_buckets * self.role_buckets
    }

    fn gen_offset(&self) -> usize {
        self.vocab
    }

    fn gate_offset(&self) -> usize {
        self.vocab + self.state_buckets * self.vocab
    }

    fn attn_offset(&self) -> usize {
        self.gate_offset() + self.state_buckets
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.state_buckets == 0 || self.role_buckets == 0 || self.window == 0 {
            return Err(Error::Shape(format!("all shape fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            theta: vec![0.0; shape.n_params()],
        }
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn random(shape: PolicyShape, rng: &mut impl rand::Rng, scale: f64) -> Self {
        let theta = (0..shape.n_params()).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { shape, theta }
    }

    pub fn from_vec(shape: PolicyShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shape.n_params(),
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(Self { shape, theta })
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }
}

/// Little-endian f64 bytes, base64 encoded. Bit-exact.
pub fn encode_f64s(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionOutput {
    /// Temperature-scaled logits `z / T`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PositionOutput {
    pub fn categorical(&self) -> Categorical {
        Categorical::full(self.probs.clone())
    }
}

/// A context to evaluate and the prediction points within it.
///
/// Position `t` means "the distribution of `tokens[t]` given `tokens[..t]`";
/// `t == tokens.len()` asks for the next token.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub tokens: &'a [TokenId],
    pub question_len: usize,
    pub positions: &'a [usize],
}

#[derive(Debug, Clone)]
struct PosCache {
    state: usize,
    context: Vec<TokenId>,
    roles: Vec<usize>,
    attn: Vec<f64>,
    copy: Vec<f64>,
}

/// Forward results with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub outputs: Vec<PositionOutput>,
    caches: Vec<PosCache>,
}

/// Gradient w.r.t. tempered logits from a gradient w.r.t. log-probabilities.
pub fn logit_grad_from_logp(probs: &[f64], dlogp: &[f64]) -> Vec<f64> {
    let total: f64 = dlogp.iter().sum();
    probs.iter().zip(dlogp).map(|(p, d)| d - p * total).collect()
}

/// Gradient w.r.t. tempered logits from a gradient w.r.t. probabilities.
pub fn logit_grad_from_probs(probs: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dp).map(|(p, d)| p * d).sum();
    probs.iter().zip(dp).map(|(p, d)| p * (d - dot)).collect()
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    shape: PolicyShape,
    markers: Markers,
}

impl Policy {
    pub fn new(shape: PolicyShape, markers: Markers) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, markers })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn markers(&self) -> Markers {
        self.markers
    }

    fn check(&self, params: &PolicyParams) {
        assert_eq!(params.shape, self.shape, "parameter shape does not match the policy");
    }

    /// Next-token distribution after `context`, whose first `question_len`
    /// tokens are the question.
    pub fn next_token_dist(
        &self,
        params: &PolicyParams,
        context: &[TokenId],
        question_len: usize,
        temperature: f64,
    ) -> Categorical {
        let probe = Probe {
            tokens: context,
            question_len,
            positions: &[context.len()],
        };
        self.forward(params, probe, temperature)
            .pop()
            .expect("one position")
            .categorical()
    }

    /// Distributions at body positions `positions`, conditioned on `prefix`
    /// followed by `body[..p]`.
    pub fn position_dists(
        &self,
        params: &PolicyParams,
        prefix: &[TokenId],
        question_len: usize,
        body: &[TokenId],
        positions: &[usize],
        temperature: f64,
    ) -> Vec<Categorical> {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(body);
        let shifted: Vec<usize> = positions.iter().map(|p| p + prefix.len()).collect();
        let probe = Probe {
            tokens: &tokens,
            question_len,
            positions: &shifted,
        };
        self.forward(params, probe, temperature)
            .into_iter()
            .map(|o| o.categorical())
            .collect()
    }

    pub fn forward(&self, params: &PolicyParams, probe: Probe<'_>, temperature: f64) -> Vec<PositionOutput> {
        self.forward_cached(params, probe, temperature).outputs
    }

    pub fn forward_cached(&self, params: &PolicyParams, probe: Probe<'_>, temperature: f64) -> Forward {
        self.check(params);
        let w = self.shape.window;
        let n = probe.tokens.len();
        let needs_full = probe.positions.iter().any(|&t| t <= w);
        let full = needs_full.then(|| {
            Annotation::new(
                &probe.tokens[..n.min(w)],
                &self.markers,
                probe.question_len,
                probe.question_len,
            )
        });
        let mut outputs = Vec::with_capacity(probe.positions.len());
        let mut caches = Vec::with_capacity(probe.positions.len());
        for &t in probe.positions {
            assert!(t <= n, "position {t} beyond context of length {n}");
            let (out, cache) = if t <= w {
                self.eval_at(
                    params,
                    full.as_ref().expect("annotated"),
                    &probe.tokens[..t],
                    temperature,
                )
            } else {
                let start = t - w;
                let local = Annotation::new(
                    &probe.tokens[start..t],
                    &self.markers,
                    probe.question_len.saturating_sub(start),
                    probe.question_len,
                );
                self.eval_at(params, &local, &probe.tokens[start..t], temperature)
            };
            outputs.push(out);
            caches.push(cache);
        }
        Forward { outputs, caches }
    }

    /// Evaluates the prediction after `ctx` (whose annotation is `ann`).
    fn eval_at(
        &self,
        params: &PolicyParams,
        ann: &Annotation,
        ctx: &[TokenId],
        temperature: f64,
    ) -> (PositionOutput, PosCache) {
        let sh = &self.shape;
        let th = &params.theta;
        let tl = ctx.len();
        let s = ann.state(tl) % sh.state_buckets;
        let attn_row = &th[sh.attn_offset() + s * sh.role_buckets..][..sh.role_buckets];
        let roles: Vec<usize> = (0..tl).map(|j| ann.role(j, tl) % sh.role_buckets).collect();
        let mut attn: Vec<f64> = roles.iter().map(|&r| attn_row[r]).collect();
        let mut copy = vec![0.0; sh.vocab];
        if tl > 0 {
            softmax_in_place(&mut attn);
            for (&x, &a) in ctx.iter().zip(&attn) {
                copy[x as usize] += a;
            }
        }
        let gate = th[sh.gate_offset() + s];
        let gen = &th[sh.gen_offset() + s * sh.vocab..][..sh.vocab];
        let logits: Vec<f64> = (0..sh.vocab)
            .map(|v| (th[v] + gen[v] + gate * (COPY_EPS + copy[v]).ln()) / temperature)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        (
            PositionOutput {
                logits,
                probs,
                log_probs,
            },
            PosCache {
                state: s,
                context: ctx.to_vec(),
                roles,
                attn,
                copy,
            },
        )
    }

    /// Accumulates into `grad` the parameter gradient given, per position,
    /// the loss gradient w.r.t. the tempered logits.
    pub fn backward(
        &self,
        params: &PolicyParams,
        fwd: &Forward,
        dlogits: &[Vec<f64>],
        temperature: f64,
        grad: &mut [f64],
    ) {
        self.check(params);
        assert_eq!(dlogits.len(), fwd.caches.len());
        assert_eq!(grad.len(), params.theta.len());
        let sh = &self.shape;
        let th = &params.theta;
        for (cache, dl) in fwd.caches.iter().zip(dlogits) {
            if dl.iter().all(|&d| d == 0.0) {
                continue;
            }
            let s = cache.state;
            let gate = th[sh.gate_offset() + s];
            let gen_off = sh.gen_offset() + s * sh.vocab;
            let mut dgate = 0.0;
            for v in 0..sh.vocab {
                let dz = dl[v] / temperature;
                grad[v] += dz;
                grad[gen_off + v] += dz;
                dgate += dz * (COPY_EPS + cache.copy[v]).ln();
            }
            grad[sh.gate_offset() + s] += dgate;
            if cache.context.is_empty() {
                continue;
            }
            let da: Vec<f64> = cache
                .context
                .iter()
                .map(|&x| {
                    let v = x as usize;
                    dl[v] / temperature * gate / (COPY_EPS + cache.copy[v])
                })
                .collect();
            let mean: f64 = cache.attn.iter().zip(&da).map(|(a, d)| a * d).sum();
            let attn_off = sh.attn_offset() + s * sh.role_buckets;
            for ((a, d), &r) in cache.attn.iter().zip(&da).zip(&cache.roles) {
                grad[attn_off + r] += a * (d - mean);
            }
        }
    }

    /// Value and exact gradient of a scalar function of the outputs at all
    /// probes. `loss` returns the value and, per probe and position, the
    /// gradient w.r.t. the tempered logits.
    pub fn grad_scalar<F>(
        &self,
        params: &PolicyParams,
        probes: &[Probe<'_>],
        temperature: f64,
        loss: F,
    ) -> (f64, Vec<f64>)
    where
        F: FnOnce(&[Vec<PositionOutput>]) -> (f64, Vec<Vec<Vec<f64>>>),
    {
        let fwds: Vec<Forward> = probes
            .iter()
            .map(|p| self.forward_cached(params, *p, temperature))
            .collect();
        let outs: Vec<Vec<PositionOutput>> = fwds.iter().map(|f| f.outputs.clone()).collect();
        let (value, dl) = loss(&outs);
        let mut grad = vec![0.0; params.theta.len()];
        for (f, d) in fwds.iter().zip(&dl) {
            self.backward(params, f, d, temperature, &mut grad);
        }
        (value, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::vocab::Vocab;

    fn setup(micro: bool) -> (Vocab, Policy) {
        let v = Vocab::with_default_reserved(["a", "b", "c", "d"]).unwrap();
        let shape = if micro {
            PolicyShape {
                vocab: v.len(),
                state_buckets: 3,
                role_buckets: 5,
                window: 8,
            }
        } else {
            PolicyShape::full(v.len())
        };
        let p = Policy::new(shape, v.markers()).unwrap();
        (v, p)
    }

    #[test]
    fn zero_params_are_uniform_with_max_entropy() {
        let (v, pol) = setup(false);
        let params = PolicyParams::zeros(pol.shape());
        let ctx = v.encode("a b <search> a").unwrap();
        let d = pol.next_token_dist(&params, &ctx, 2, 1.0);
        let u = 1.0 / v.len() as f64;
        assert!(d.probs.iter().all(|p| (p - u).abs() < 1e-15));
        assert!((d.entropy() - (v.len() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn high_temperature_flattens_and_is_deterministic() {
        let (v, pol) = setup(false);
        let mut rng = substream(3, "test", &[]);
        let params = PolicyParams::random(pol.shape(), &mut rng, 2.0);
        let ctx = v.encode("a b <search> a").unwrap();
        let d = pol.next_token_dist(&params, &ctx, 2, 1e6);
        let max = d.probs.iter().cloned().fold(0.0, f64::max);
        let min = d.probs.iter().cloned().fold(1.0, f64::min);
        assert!(max - min < 1e-6);
        let d1 = pol.next_token_dist(&params, &ctx, 2, 1.0);
        let d2 = pol.next_token_dist(&params, &ctx, 2, 1.0);
        assert_eq!(d1, d2);
        assert!(d1.is_valid(1e-9));
    }

    #[test]
    fn window_truncation_keeps_suffix() {
        let (v, pol) = setup(true);
        let mut rng = substream(4, "test", &[]);
        let params = PolicyParams::random(pol.shape(), &mut rng, 1.0);
        let long = v
            .encode("a b c d <think> a b c d a b c d </think> <search> a b")
            .unwrap();
        let d = pol.next_token_dist(&params, &long, 2, 1.0);
        assert!(d.is_valid(1e-9));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (v, pol) = setup(true);
        let params = PolicyParams::random(pol.shape(), &mut substream(5, "t", &[]), 1.0);
        let toks = v.encode("a b <search> c d </search>").unwrap();
        let probe = Probe {
            tokens: &toks,
            question_len: 2,
            positions: &[2, 3, 4],
        };
        let (val, g) = pol.grad_scalar(&params, &[probe], 1.0, |outs| {
            (
                7.0,
                outs.iter()
                    .map(|o| o.iter().map(|p| vec![0.0; p.logits.len()]).collect())
                    .collect(),
            )
        });
        assert_eq!(val, 7.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    fn nll(pol: &Policy, params: &PolicyParams, toks: &[TokenId], temp: f64) -> (f64, Vec<f64>) {
        let positions: Vec<usize> = (2..toks.len()).collect();
        let probe = Probe {
            tokens: toks,
            question_len: 2,
            positions: &positions,
        };
        pol.grad_scalar(params, &[probe], temp, |outs| {
            let mut val = 0.0;
            let mut grads = Vec::new();
            for (o, &t) in outs[0].iter().zip(&positions) {
                let tok = toks[t] as usize;
                val -= o.log_probs[tok];
                let mut d = vec![0.0; o.probs.len()];
                d[tok] = -1.0;
                grads.push(logit_grad_from_logp(&o.probs, &d));
            }
            let n = positions.len() as f64;
            for g in &mut grads {
                g.iter_mut().for_each(|x| *x /= n);
            }
            (val / n, vec![grads])
        })
    }

    #[test]
    fn logit_component_gradient_matches_finite_differences() {
        for micro in [true, false] {
            let (v, pol) = setup(micro);
            let params = PolicyParams::random(pol.shape(), &mut substream(6, "t", &[micro as u64]), 0.7);
            let toks = v
                .encode("a b <search> a c </search> <documents> a c d </documents> <answer> d")
                .unwrap();
            let positions: Vec<usize> = vec![3, 4, 12, toks.len()];
            let probe = Probe {
                tokens: &toks,
                question_len: 2,
                positions: &positions,
            };
            let target = (2usize, 20usize);
            let f = |p: &PolicyParams| pol.forward(p, probe, 0.8)[target.0].logits[target.1];
            let (_, g) = pol.grad_scalar(&params, &[probe], 0.8, |outs| {
                let mut d: Vec<Vec<f64>> = outs[0].iter().map(|o| vec![0.0; o.logits.len()]).collect();
                d[target.0][target.1] = 1.0;
                (outs[0][target.0].logits[target.1], vec![d])
            });
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            // every parameter with a nonzero analytic gradient, plus a spread of the rest
            let idx: Vec<usize> = (0..params.theta.len())
                .filter(|&i| g[i] != 0.0 || i % 97 == 0)
                .collect();
            assert!(idx.iter().filter(|&&i| g[i] != 0.0).count() >= 3);
            for i in idx {
                let mut up = params.clone();
                up.theta[i] += h;
                let mut dn = params.clone();
                dn.theta[i] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                max_rel = max_rel.max((fd - g[i]).abs() / denom);
            }
            assert!(max_rel < 1e-5, "micro={micro} max relative error {max_rel}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences_and_descends() {
        let (v, pol) = setup(true);
        let mut params = PolicyParams::random(pol.shape(), &mut substream(8, "t", &[]), 0.5);
        let toks = v
            .encode("a b <think> c </think> <search> a b </search> <answer> b </answer>")
            .unwrap();
        let (_, g) = nll(&pol, &params, &toks, 1.3);
        let h = 1e-5;
        for i in (0..params.theta.len()).step_by(3) {
            let mut up = params.clone();
            up.theta[i] += h;
            let mut dn = params.clone();
            dn.theta[i] -= h;
            let fd = (nll(&pol, &up, &toks, 1.3).0 - nll(&pol, &dn, &toks, 1.3).0) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-5, "param {i}: fd {fd} analytic {}", g[i]);
        }
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let (val, g) = nll(&pol, &params, &toks, 1.0);
            assert!(val < prev);
            prev = val;
            for (p, gi) in params.theta.iter_mut().zip(&g) {
                *p -= 0.05 * gi;
            }
        }
    }

    #[test]
    fn f64_codec_is_bit_exact() {
        let xs = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25];
        let back = decode_f64s(&encode_f64s(&xs)).unwrap();
        assert!(xs.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_f64s("AAAA").is_err());
    }
}
