//! Least-squares identification from trajectory data.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::{numerical_rank, simulate, FeedbackGain, LinearSystem, Policy, Trajectory};

/// Relative singular-value cutoff for every pseudo-inverse in this module.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Gramians (and excitation regressors) worse conditioned than this are rejected.
pub const CONDITION_CAP: f64 = 1e10;

/// Column-aligned data triples `(X^k, U^k, X^{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub x_k: DMatrix<f64>,
    pub u_k: DMatrix<f64>,
    pub x_k1: DMatrix<f64>,
}

impl TrajectoryBatch {
    pub fn new(x_k: DMatrix<f64>, u_k: DMatrix<f64>, x_k1: DMatrix<f64>) -> Result<Self> {
        let nd = x_k.ncols();
        if u_k.ncols() != nd || x_k1.ncols() != nd {
            return Err(Error::shape(format!(
                "column counts differ: X^k {}, U^k {}, X^k+1 {}",
                nd,
                u_k.ncols(),
                x_k1.ncols()
            )));
        }
        if x_k1.nrows() != x_k.nrows() {
            return Err(Error::shape("X^k and X^k+1 must have the same row count"));
        }
        Ok(Self { x_k, u_k, x_k1 })
    }

    /// Shift-by-one alignment: column j holds `(x(j), u(j), x(j+1))`.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let nd = traj.inputs.len();
        let n = traj.states[0].len();
        let m = traj.inputs.first().map_or(0, |u| u.len());
        let mut x_k = DMatrix::zeros(n, nd);
        let mut u_k = DMatrix::zeros(m, nd);
        let mut x_k1 = DMatrix::zeros(n, nd);
        for j in 0..nd {
            x_k.set_column(j, &traj.states[j]);
            u_k.set_column(j, &traj.inputs[j]);
            x_k1.set_column(j, &traj.states[j + 1]);
        }
        Self { x_k, u_k, x_k1 }
    }

    /// Column-wise pooling of several batches.
    pub fn concat(batches: &[TrajectoryBatch]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| Error::invalid("no batches to concatenate"))?;
        let (n, m) = (first.n(), first.m());
        if batches.iter().any(|b| b.n() != n || b.m() != m) {
            return Err(Error::shape("batches have different dimensions"));
        }
        let nd: usize = batches.iter().map(|b| b.n_d()).sum();
        let mut out = Self {
            x_k: DMatrix::zeros(n, nd),
            u_k: DMatrix::zeros(m, nd),
            x_k1: DMatrix::zeros(n, nd),
        };
        let mut c = 0;
        for b in batches {
            let w = b.n_d();
            out.x_k.view_mut((0, c), (n, w)).copy_from(&b.x_k);
            out.u_k.view_mut((0, c), (m, w)).copy_from(&b.u_k);
            out.x_k1.view_mut((0, c), (n, w)).copy_from(&b.x_k1);
            c += w;
        }
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.x_k.nrows()
    }

    pub fn m(&self) -> usize {
        self.u_k.nrows()
    }

    pub fn n_d(&self) -> usize {
        self.x_k.ncols()
    }

    /// `[X^k; U^k]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m, nd) = (self.n(), self.m(), self.n_d());
        let mut z = DMatrix::zeros(n + m, nd);
        z.view_mut((0, 0), (n, nd)).copy_from(&self.x_k);
        z.view_mut((n, 0), (m, nd)).copy_from(&self.u_k);
        z
    }

    /// One CSV row per column with header groups `xk_*`, `uk_*`, `xk1_*`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.n()).map(|i| format!("xk_{i}")).collect();
        header.extend((1..=self.m()).map(|i| format!("uk_{i}")));
        header.extend((1..=self.n()).map(|i| format!("xk1_{i}")));
        w.write_record(&header)?;
        for j in 0..self.n_d() {
            let rec: Vec<String> = self
                .x_k
                .column(j)
                .iter()
                .chain(self.u_k.column(j).iter())
                .chain(self.x_k1.column(j).iter())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let idx = |prefix: &str| -> Vec<usize> {
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.rsplit_once('_').is_some_and(|(p, s)| p == prefix && s.parse::<usize>().is_ok()))
                .map(|(i, _)| i)
                .collect()
        };
        let (ix, iu, ix1) = (idx("xk"), idx("uk"), idx("xk1"));
        if ix.is_empty() || ix.len() != ix1.len() || ix.len() + iu.len() + ix1.len() != header.len() {
            return Err(Error::Parse(format!("unexpected batch header {:?}", header)));
        }
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            cols.push(row);
        }
        let nd = cols.len();
        let pick = |ids: &[usize]| DMatrix::from_fn(ids.len(), nd, |i, j| cols[j][ids[i]]);
        Self::new(pick(&ix), pick(&iu), pick(&ix1))
    }
}

/// Estimates of `A + g1 B D` and `g2 B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressedModel {
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
}

impl RegressedModel {
    pub fn as_system(&self) -> Result<LinearSystem> {
        LinearSystem::new(self.m1.clone(), self.m2.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub gramian_rank: usize,
    pub required_rank: usize,
    pub condition_number: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGain {
    pub gain: FeedbackGain,
    /// False when `M2` is rank deficient and the least-squares solution is one of many.
    pub unique: bool,
}

/// SVD pseudo-inverse with singular values below `cutoff * sigma_max` dropped; also returns the rank kept.
pub fn pinv(m: &DMatrix<f64>, cutoff: f64) -> (DMatrix<f64>, usize) {
    let Some(svd) = crate::linalg::svd(m) else {
        return (DMatrix::from_element(m.ncols(), m.nrows(), f64::NAN), 0);
    };
    let (u, vt) = (&svd.u, &svd.v_t);
    let top = svd.singular_values.max();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if top > 0.0 && s > cutoff * top {
            rank += 1;
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    (out, rank)
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = crate::linalg::singular_values(m);
    if sv.is_empty() {
        return f64::INFINITY;
    }
    let lo = sv.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / lo
    }
}

/// Right inverse `Z' (Z Z')^-1` of a wide data matrix, rejecting rank-deficient or badly
/// conditioned Gramians. Computed from the SVD of `Z` rather than the Gramian, which would square
/// the conditioning.
fn data_right_inverse(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = z * z.transpose();
    let rank = numerical_rank(&g, PINV_CUTOFF);
    if rank < g.nrows() || condition(&g) >= CONDITION_CAP {
        return Err(Error::Identifiability { rank, required: g.nrows() });
    }
    Ok(pinv(z, 0.0).0)
}

/// Expert closed loop and gain: `F = X+ X' (X X')^-1`, `K = U X' (X X')^-1`.
pub fn estimate_expert(data: &TrajectoryBatch) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if data.n_d() <= data.n() {
        let rank = numerical_rank(&data.x_k, PINV_CUTOFF);
        return Err(Error::Identifiability { rank, required: data.n() });
    }
    let right = data_right_inverse(&data.x_k)?;
    Ok((&data.x_k1 * &right, &data.u_k * &right))
}

/// `[M1 M2] = X+ Z' (Z Z')^-1` with `Z = [X; U]`.
pub fn regress_model(data: &TrajectoryBatch) -> Result<RegressedModel> {
    let z = data.stacked();
    let m = &data.x_k1 * data_right_inverse(&z)?;
    let n = data.n();
    Ok(RegressedModel {
        m1: m.columns(0, n).into_owned(),
        m2: m.columns(n, data.m()).into_owned(),
    })
}

/// Least-squares gain matching `M1 + M2 K ~ F_expert`.
pub fn target_gain_uncertain(model: &RegressedModel, f_expert: &DMatrix<f64>) -> Result<TargetGain> {
    if f_expert.shape() != model.m1.shape() {
        return Err(Error::shape("expert closed loop must match M1"));
    }
    let m = model.m2.ncols();
    let (inv, rank) = pinv(&model.m2, PINV_CUTOFF);
    Ok(TargetGain {
        gain: FeedbackGain::new(inv * (f_expert - &model.m1)),
        unique: rank == m,
    })
}

/// Row of half-vectorized outer-product monomials `z_i z_j`, `i <= j`.
pub fn quadratic_features(z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(z[i] * z[j]);
        }
    }
    out
}

pub fn excitation_check(data: &TrajectoryBatch) -> ExcitationReport {
    let d = data.n() + data.m();
    let required = d * (d + 1) / 2;
    let z = data.stacked();
    let nd = data.n_d();
    if nd == 0 {
        return ExcitationReport {
            gramian_rank: 0,
            required_rank: required,
            condition_number: f64::INFINITY,
            passes: false,
        };
    }
    let mut phi = DMatrix::zeros(nd, required);
    for j in 0..nd {
        let col: Vec<f64> = z.column(j).iter().copied().collect();
        for (k, v) in quadratic_features(&col).into_iter().enumerate() {
            phi[(j, k)] = v;
        }
    }
    let sv = crate::linalg::singular_values(&phi);
    let top = if sv.is_empty() { 0.0 } else { sv.max() };
    let rank = if top > 0.0 { sv.iter().filter(|&&s| s > PINV_CUTOFF * top).count() } else { 0 };
    let condition_number = if rank >= required && nd >= required {
        top / sv.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        f64::INFINITY
    };
    ExcitationReport {
        gramian_rank: rank,
        required_rank: required,
        condition_number,
        passes: rank >= required && condition_number < CONDITION_CAP,
    }
}

/// Closed-loop expert data from `trajectories` random initial states.
pub fn expert_data<R: Rng>(sys: &LinearSystem, gain: &FeedbackGain, trajectories: usize, steps: usize, rng: &mut R) -> Result<TrajectoryBatch> {
    let batches = (0..trajectories)
        .map(|_| {
            let x0 = DVector::from_fn(sys.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
            simulate(sys, Policy::Gain(gain), &x0, steps).map(|t| TrajectoryBatch::from_trajectory(&t))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryBatch::concat(&batches)
}

/// Open-loop data under iid Gaussian inputs of the given amplitude.
pub fn excited_data<R: Rng>(sys: &LinearSystem, x0: &DVector<f64>, steps: usize, amplitude: f64, rng: &mut R) -> Result<TrajectoryBatch> {
    let inputs: Vec<DVector<f64>> = (0..steps)
        .map(|_| DVector::from_fn(sys.m(), |_, _| amplitude * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let traj = simulate(sys, Policy::Inputs(&inputs), x0, steps)?;
    Ok(TrajectoryBatch::from_trajectory(&traj))
}
