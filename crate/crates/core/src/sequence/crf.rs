//! Order-one linear-chain CRF over affine per-paragraph emissions.
//!
//! `score(y) = start[y₀] + Σ e[t, y_t] + Σ trans[y_{t-1}, y_t] + stop[y_{N-1}]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_docs, flat_targets, stack_rows, SeqInput, SequenceModel};
use crate::autodiff::Var;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::nn::{eval_graph, Graph, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

const L: usize = Label::COUNT;

/// Transition, start and stop scores as tape variables.
#[derive(Clone, Copy)]
pub struct CrfScores<'t, T: Real> {
    /// `[4, 4]`, row = previous label.
    pub transition: Var<'t, T>,
    /// `[1, 4]`.
    pub start: Var<'t, T>,
    /// `[1, 4]`.
    pub stop: Var<'t, T>,
}

/// `log Σ_y exp(score(y))` by the forward recursion. `emissions`: `[N, 4]`.
pub fn crf_log_partition<'t, T: Real>(emissions: Var<'t, T>, s: &CrfScores<'t, T>) -> Result<Var<'t, T>> {
    let n = check_emissions(&emissions.shape())?;
    let mut alpha = s.start.add(emissions.slice(0, 0, 1)?)?;
    for t in 1..n {
        // alpha[i] + trans[i, j], reduced over i
        let prev = alpha.reshape(&[L, 1])?;
        alpha = prev
            .add(s.transition)?
            .logsumexp(0)?
            .add(emissions.slice(0, t, 1)?)?;
    }
    alpha.add(s.stop)?.logsumexp(1)?.reshape(&[1])
}

/// Unnormalized score of one label path.
pub fn crf_path_score<'t, T: Real>(
    emissions: Var<'t, T>,
    s: &CrfScores<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>> {
    let n = check_emissions(&emissions.shape())?;
    if labels.len() != n || labels.iter().any(|&y| y >= L) {
        return Err(Error::invalid(format!("label path {labels:?} does not fit {n} positions")));
    }
    let emit: Vec<usize> = labels.iter().enumerate().map(|(t, &y)| t * L + y).collect();
    let trans: Vec<usize> = labels.windows(2).map(|w| w[0] * L + w[1]).collect();
    let mut score = emissions
        .pick_sum(&emit)?
        .add(s.start.pick_sum(&[labels[0]])?)?
        .add(s.stop.pick_sum(&[labels[n - 1]])?)?;
    if !trans.is_empty() {
        score = score.add(s.transition.pick_sum(&trans)?)?;
    }
    Ok(score)
}

/// `log Z − score(gold)`.
pub fn crf_nll<'t, T: Real>(emissions: Var<'t, T>, s: &CrfScores<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    crf_log_partition(emissions, s)?.sub(crf_path_score(emissions, s, labels)?)
}

/// Highest-scoring path. Ties go to the lowest label index, both at each
/// backpointer and at the final position.
pub fn crf_viterbi<T: Real>(emissions: &Tensor<T>, transition: &Tensor<T>, start: &[T], stop: &[T]) -> Result<Vec<usize>> {
    let n = check_emissions(emissions.shape())?;
    if transition.shape() != [L, L] || start.len() != L || stop.len() != L {
        return Err(Error::shape("crf_viterbi", &[L, L], transition.shape()));
    }
    let mut delta: Vec<T> = (0..L).map(|j| start[j] + emissions.at(0, j)).collect();
    let mut back = vec![[0usize; L]; n];
    for t in 1..n {
        let mut next = vec![T::zero(); L];
        for j in 0..L {
            let mut best = 0;
            let mut best_v = delta[0] + transition.at(0, j);
            for i in 1..L {
                let v = delta[i] + transition.at(i, j);
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            back[t][j] = best;
            next[j] = best_v + emissions.at(t, j);
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..L {
        if delta[j] + stop[j] > delta[last] + stop[last] {
            last = j;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

fn check_emissions(shape: &[usize]) -> Result<usize> {
    if shape.len() != 2 || shape[1] != L || shape[0] == 0 {
        return Err(Error::shape("crf emissions", &[1, L], shape));
    }
    Ok(shape[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub input_dim: usize,
    pub geo_width: usize,
}

#[derive(Clone, Debug)]
pub struct CrfModel<T> {
    pub config: CrfConfig,
    pub store: ParamStore<T>,
    pub emission: Linear,
    pub transition: ParamId,
    pub start: ParamId,
    pub stop: ParamId,
}

impl<T: Real> CrfModel<T> {
    pub fn new(config: CrfConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::invalid("CRF input width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emission = Linear::new(
            &mut store,
            &mut rng,
            "crf.emission",
            config.input_dim + config.geo_width,
            L,
        );
        let transition = store.add("crf.transition", Tensor::zeros(&[L, L]));
        let start = store.add("crf.start", Tensor::zeros(&[1, L]));
        let stop = store.add("crf.stop", Tensor::zeros(&[1, L]));
        Ok(CrfModel {
            config,
            store,
            emission,
            transition,
            start,
            stop,
        })
    }

    pub fn scores<'t>(&self, g: &Graph<'t, T>) -> CrfScores<'t, T> {
        CrfScores {
            transition: g.p(self.transition),
            start: g.p(self.start),
            stop: g.p(self.stop),
        }
    }

    fn check(&self, docs: &[&SeqInput<T>]) -> Result<()> {
        check_docs(docs, self.config.input_dim + self.config.geo_width, self.config.geo_width)
    }
}

impl<T: Real> SequenceModel<T> for CrfModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Emission scores.
    fn logits<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<Var<'t, T>> {
        self.check(docs)?;
        self.emission.forward(g, g.input(stack_rows(docs)?))
    }

    /// Sum of per-document NLLs divided by the paragraph count.
    fn loss<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>], labels: &[&[Label]]) -> Result<Var<'t, T>> {
        let emissions = self.logits(g, docs)?;
        let s = self.scores(g);
        let targets = flat_targets(labels);
        let mut total: Option<Var<'t, T>> = None;
        let mut at = 0;
        for d in docs {
            let n = d.len();
            let nll = crf_nll(emissions.slice(0, at, n)?, &s, &targets[at..at + n])?;
            total = Some(match total {
                Some(t) => t.add(nll)?,
                None => nll,
            });
            at += n;
        }
        Ok(total.expect("non-empty batch").scale(T::of(1.0 / at as f64)))
    }

    fn predict(&self, docs: &[&SeqInput<T>]) -> Result<Vec<Vec<Label>>> {
        let emissions = eval_graph(&self.store, |g| Ok(self.logits(g, docs)?.value()))?;
        let trans = self.store.get(self.transition);
        let (start, stop) = (self.store.get(self.start).data(), self.store.get(self.stop).data());
        let mut out = Vec::with_capacity(docs.len());
        let mut at = 0;
        for d in docs {
            let n = d.len();
            let e = Tensor::new(&[n, L], emissions.data()[at * L..(at + n) * L].to_vec())?;
            let path = crf_viterbi(&e, trans, start, stop)?;
            out.push(path.into_iter().map(|i| Label::from_index(i).expect("4 classes")).collect());
            at += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn scores<'t>(tape: &'t Tape<f64>, trans: &[f64], start: &[f64], stop: &[f64]) -> CrfScores<'t, f64> {
        CrfScores {
            transition: tape.constant(Tensor::from_f64(&[4, 4], trans).unwrap()),
            start: tape.constant(Tensor::from_f64(&[1, 4], start).unwrap()),
            stop: tape.constant(Tensor::from_f64(&[1, 4], stop).unwrap()),
        }
    }

    #[test]
    fn zero_scores_count_paths() {
        let tape = Tape::new();
        let s = scores(&tape, &[0.0; 16], &[0.0; 4], &[0.0; 4]);
        let e = tape.constant(Tensor::zeros(&[2, 4]));
        let z = crf_log_partition(e, &s).unwrap().item();
        assert!((z - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_is_logsumexp() {
        let tape = Tape::new();
        let (e, st, sp) = ([0.3, -1.0, 2.0, 0.5], [0.1, 0.2, -0.3, 0.0], [1.0, 0.0, 0.5, -2.0]);
        let s = scores(&tape, &[0.7; 16], &st, &sp);
        let z = crf_log_partition(tape.constant(Tensor::from_f64(&[1, 4], &e).unwrap()), &s)
            .unwrap()
            .item();
        let want = (0..4).map(|j| (e[j] + st[j] + sp[j]).exp()).sum::<f64>().ln();
        assert!((z - want).abs() < 1e-12);
    }

    #[test]
    fn forced_path_has_zero_loss() {
        let tape = Tape::new();
        let ninf = f64::NEG_INFINITY;
        // only Basic → Theorem → Theorem survives
        let mut trans = [ninf; 16];
        trans[1] = 0.0;
        trans[5] = 0.0;
        let s = scores(&tape, &trans, &[0.0, ninf, ninf, ninf], &[ninf, 0.0, ninf, ninf]);
        let e = tape.constant(Tensor::from_f64(&[3, 4], &[0.5; 12]).unwrap());
        assert_eq!(crf_nll(e, &s, &[0, 1, 1]).unwrap().item(), 0.0);
    }

    #[test]
    fn viterbi_ties_and_decoupled_case() {
        let z = Tensor::<f64>::zeros(&[5, 4]);
        assert_eq!(crf_viterbi(&z, &Tensor::zeros(&[4, 4]), &[0.0; 4], &[0.0; 4]).unwrap(), vec![0; 5]);
        let peaks = [2, 0, 3, 1];
        let mut e = Tensor::<f64>::zeros(&[4, 4]);
        for (t, &p) in peaks.iter().enumerate() {
            e.data_mut()[t * 4 + p] = 5.0;
        }
        assert_eq!(crf_viterbi(&e, &Tensor::zeros(&[4, 4]), &[0.0; 4], &[0.0; 4]).unwrap(), peaks);
    }
}
