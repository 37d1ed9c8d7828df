//! SDR / SIR / SAR by orthogonal projection onto delayed copies of the
//! reference signals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::audio::Waveform;
use crate::datagen::{EvalPair, RenderedPair};
use crate::error::{Error, Result};
use crate::model::SeparationModel;
use crate::nn::Scalar;

/// Ratios are capped here when an error term vanishes.
pub const DB_CAP: f64 = 200.0;
/// Error energy at or below this fraction of the numerator is round-off of
/// the normal-equation projection (~1e-20 for an exact estimate) and counts
/// as zero.
pub const ROUNDOFF_ENERGY: f64 = 1e-18;
/// Added to the Gram matrix diagonal before solving.
pub const DAMPING: f64 = 1e-10;
pub const DEFAULT_FILTER_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BssEvalResult {
    pub sdr: f64,
    pub sar: f64,
    pub sir: f64,
    pub filter_len: usize,
}

/// `sum_{n >= max(a, b)} x[n - a] * y[n - b]` for `a, b < l`, truncated to
/// the signal length.
fn lagged_products(x: &[f64], y: &[f64], l: usize) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(l, l);
    let direct = |a: usize, b: usize| -> f64 {
        let start = a.max(b);
        (start..n).map(|t| x[t - a] * y[t - b]).sum()
    };
    for b in 0..l {
        m[(0, b)] = direct(0, b);
    }
    for a in 1..l {
        m[(a, 0)] = direct(a, 0);
    }
    // shifting both lags by one drops the last term
    for a in 1..l {
        for b in 1..l {
            let drop = x[n - a] * y[n - b];
            m[(a, b)] = m[(a - 1, b - 1)] - drop;
        }
    }
    m
}

/// `sum_{n >= a} e[n] * x[n - a]`.
fn lagged_dot(e: &[f64], x: &[f64], l: usize) -> Vec<f64> {
    (0..l).map(|a| (a..e.len()).map(|t| e[t] * x[t - a]).sum()).collect()
}

/// `sum_a coef[a] * x[n - a]`.
fn filter(x: &[f64], coef: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (a, &c) in coef.iter().enumerate() {
        for t in a..x.len() {
            out[t] += c * x[t - a];
        }
    }
    out
}

/// Least-squares projection of `e` onto the delayed copies of `refs`.
fn project(e: &[f64], refs: &[&[f64]], l: usize) -> Result<Vec<f64>> {
    let k = refs.len();
    let mut gram = DMatrix::zeros(k * l, k * l);
    for (i, ri) in refs.iter().enumerate() {
        for (j, rj) in refs.iter().enumerate().skip(i) {
            let block = lagged_products(ri, rj, l);
            gram.view_mut((i * l, j * l), (l, l)).copy_from(&block);
            if i != j {
                gram.view_mut((j * l, i * l), (l, l)).copy_from(&block.transpose());
            }
        }
    }
    for d in 0..k * l {
        gram[(d, d)] += DAMPING;
    }
    let rhs = DVector::from_iterator(k * l, refs.iter().flat_map(|r| lagged_dot(e, r, l)));
    let coef = gram.cholesky().ok_or(Error::SingularGram)?.solve(&rhs);
    let mut out = vec![0.0; e.len()];
    for (i, r) in refs.iter().enumerate() {
        let part = filter(r, &coef.as_slice()[i * l..(i + 1) * l]);
        out.iter_mut().zip(part).for_each(|(o, p)| *o += p);
    }
    Ok(out)
}

/// Splits `estimate` into the part explained by the true source (the first
/// reference), the part explained only by the other reference, and the
/// remainder.
pub fn bss_decompose(estimate: &Waveform, references: &[Waveform; 2], filter_len: usize) -> Result<Decomposition> {
    let n = estimate.len();
    if references.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {n} samples, references {} and {}",
            references[0].len(),
            references[1].len()
        )));
    }
    if filter_len == 0 || filter_len > n {
        return Err(Error::ShapeMismatch(format!("filter length {filter_len} for {n} samples")));
    }
    let e = &estimate.samples;
    let (r1, r2) = (&references[0].samples[..], &references[1].samples[..]);
    let s_target = project(e, &[r1], filter_len)?;
    let both = project(e, &[r1, r2], filter_len)?;
    let e_interf = both.iter().zip(&s_target).map(|(b, s)| b - s).collect();
    let e_artif = e.iter().zip(&both).map(|(x, b)| x - b).collect();
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

fn energy(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= ROUNDOFF_ENERGY * num || den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).min(DB_CAP)
}

pub fn bss_eval(estimate: &Waveform, references: &[Waveform; 2], filter_len: usize) -> Result<BssEvalResult> {
    let d = bss_decompose(estimate, references, filter_len)?;
    let st = energy(d.s_target.iter().copied());
    let ei = energy(d.e_interf.iter().copied());
    let ea = energy(d.e_artif.iter().copied());
    let noise = energy(d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b));
    let sig_int = energy(d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b));
    Ok(BssEvalResult {
        sdr: ratio_db(st, noise),
        sir: ratio_db(st, ei),
        sar: ratio_db(sig_int, ea),
        filter_len,
    })
}

/// What is scored as the target estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateSource {
    /// The model's separated target.
    Model,
    /// The true target (upper bound).
    OracleTarget,
    /// The unprocessed mixture (baseline).
    OracleMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub pair_id: usize,
    pub snr_db: f64,
    pub result: BssEvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub mean: BssEvalResult,
}

impl EvalReport {
    /// `pair_id,snr_db,sdr,sar,sir` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,snr_db,sdr,sar,sir\n");
        for p in &self.pairs {
            out += &format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                p.pair_id, p.snr_db, p.result.sdr, p.result.sar, p.result.sir
            );
        }
        let mean_snr = self.pairs.iter().map(|p| p.snr_db).sum::<f64>() / self.pairs.len() as f64;
        out += &format!(
            "mean,{mean_snr},{:.6},{:.6},{:.6}\n",
            self.mean.sdr, self.mean.sar, self.mean.sir
        );
        out
    }
}

/// Scores every pair (in parallel) and averages.
pub fn evaluate_rendered<T: Scalar>(
    pairs: &[RenderedPair],
    model: Option<&SeparationModel<T>>,
    source: EstimateSource,
    filter_len: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidManifest("evaluation set is empty".into()));
    }
    let scores = pairs
        .par_iter()
        .map(|p| {
            let estimate = match source {
                EstimateSource::OracleTarget => p.target.clone(),
                EstimateSource::OracleMixture => p.mixture.clone(),
                EstimateSource::Model => {
                    let m = model.ok_or_else(|| Error::Config("model evaluation without a model".into()))?;
                    m.separate_utterance(&p.mixture, &p.target, &p.interference_clean)?.target
                }
            };
            let refs = [p.target.clone(), p.interference.clone()];
            Ok(PairScore {
                pair_id: p.pair_id,
                snr_db: p.snr_db,
                result: bss_eval(&estimate, &refs, filter_len)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = scores.len() as f64;
    let mean = BssEvalResult {
        sdr: scores.iter().map(|s| s.result.sdr).sum::<f64>() / k,
        sar: scores.iter().map(|s| s.result.sar).sum::<f64>() / k,
        sir: scores.iter().map(|s| s.result.sir).sum::<f64>() / k,
        filter_len,
    };
    Ok(EvalReport { pairs: scores, mean })
}

/// Loads, mixes and scores an evaluation manifest.
pub fn evaluate_model<T: Scalar>(
    pairs: &[EvalPair],
    model: Option<&SeparationModel<T>>,
    source: EstimateSource,
    filter_len: usize,
) -> Result<EvalReport> {
    let rendered = pairs.iter().map(EvalPair::render).collect::<Result<Vec<_>>>()?;
    evaluate_rendered(&rendered, model, source, filter_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000)
    }

    #[test]
    fn lagged_products_match_direct_sums() {
        let x: Vec<f64> = (0..23).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let y: Vec<f64> = (0..23).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let m = lagged_products(&x, &y, 6);
        for a in 0..6 {
            for b in 0..6 {
                let direct: f64 = (a.max(b)..23).map(|t| x[t - a] * y[t - b]).sum();
                assert!((m[(a, b)] - direct).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn self_projection_is_exact() {
        let r1 = wf((0..64).map(|i| (i as f64 * 0.3).sin()).collect());
        let r2 = wf((0..64).map(|i| (i as f64 * 1.7).cos()).collect());
        let d = bss_decompose(&r1, &[r1.clone(), r2.clone()], 1).unwrap();
        for (s, r) in d.s_target.iter().zip(&r1.samples) {
            assert!((s - r).abs() < 1e-8);
        }
        assert!(d.e_interf.iter().chain(&d.e_artif).all(|v| v.abs() < 1e-8));
        let res = bss_eval(&r1, &[r1.clone(), r2], 1).unwrap();
        assert!(res.sdr > 150.0 && res.sir > 150.0 && res.sar > 150.0);
    }

    #[test]
    fn exact_estimate_hits_the_cap_at_any_filter_length() {
        let r1 = wf((0..4000).map(|i| (i as f64 * 0.031).sin() + 0.3 * (i as f64 * 0.17).cos()).collect());
        let r2 = wf((0..4000).map(|i| ((i * 7919) % 211) as f64 / 211.0 - 0.5).collect());
        for l in [1, 8, 64, 512] {
            let res = bss_eval(&r1, &[r1.clone(), r2.clone()], l).unwrap();
            assert_eq!((res.sdr, res.sir, res.sar), (DB_CAP, DB_CAP, DB_CAP), "L = {l}");
        }
    }

    #[test]
    fn ratios_below_the_roundoff_floor_are_not_capped() {
        assert_eq!(ratio_db(1.0, 0.0), DB_CAP);
        assert_eq!(ratio_db(1.0, 1e-19), DB_CAP);
        assert!((ratio_db(1.0, 1e-17) - 170.0).abs() < 1e-9);
        assert!((ratio_db(4.0, 1.0) - 6.020599913279624).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = wf(vec![1.0; 8]);
        let b = wf(vec![1.0; 9]);
        assert!(matches!(bss_eval(&a, &[a.clone(), b], 1), Err(Error::ShapeMismatch(_))));
        assert!(bss_eval(&a, &[a.clone(), a.clone()], 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = BssEvalResult {
            sdr: 1.0,
            sar: 2.0,
            sir: 3.0,
            filter_len: 1,
        };
        let rep = EvalReport {
            pairs: vec![PairScore {
                pair_id: 0,
                snr_db: -5.0,
                result: r,
            }],
            mean: r,
        };
        let csv = rep.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "pair_id,snr_db,sdr,sar,sir");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("mean,"));
    }
}
