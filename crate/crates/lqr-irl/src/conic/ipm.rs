//! Homogeneous self-dual embedding interior-point method with Nesterov-Todd scaling and a
//! Mehrotra predictor-corrector.
//!
//! Solves `min c'x  s.t.  Ax = b,  Gx + s = h,  s in K` together with its dual
//! `max -b'y - h'z  s.t.  A'y + G'z + c = 0,  z in K`, or returns an infeasibility certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cones::{nt_scaling, BlockScaling, Cone};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Residuals and gap the iteration aims for.
    pub tol: f64,
    /// Looser level accepted when progress stalls; also the reported feasibility contract.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-10, feas_tol: 1e-7, max_iter: 120, step_fraction: 0.99 }
    }
}

#[derive(Clone, Debug)]
pub struct Canonical {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub cones: Vec<Cone>,
}

impl Canonical {
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cones.len() + 1);
        let mut o = 0;
        out.push(0);
        for c in &self.cones {
            o += c.dim();
            out.push(o);
        }
        out
    }

    /// Worst equality residual or cone-membership violation of `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.a.nrows() > 0 {
            worst = worst.max((&self.a * x - &self.b).amax());
        }
        let s = &self.h - &self.g * x;
        let off = self.offsets();
        for (i, c) in self.cones.iter().enumerate() {
            let blk = &s.as_slice()[off[i]..off[i + 1]];
            worst = worst.max(-c.min_eig(blk));
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }
}

#[derive(Clone, Debug)]
pub struct RawSolution {
    pub status: Status,
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    pub iterations: usize,
    pub pres: f64,
    pub dres: f64,
    pub gap: f64,
}

/// Equality rows reduced to an orthonormal basis of the row space, plus the null space.
struct EqBasis {
    /// `r x n`, orthonormal rows.
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// `n x (n - r)`, orthonormal columns spanning `null(A)`.
    z: DMatrix<f64>,
}

fn equality_basis(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<EqBasis, ()> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Ok(EqBasis { a: DMatrix::zeros(0, n), b: DVector::zeros(0), z: DMatrix::identity(n, n) });
    }
    // Work with A' so the SVD is always thin in the right direction.
    let svd = crate::linalg::svd(&a.transpose()).ok_or(())?;
    let v = svd.u;
    let ut = svd.v_t;
    let sv = &svd.singular_values;
    let top = sv.max();
    let keep: Vec<usize> = (0..sv.len()).filter(|&i| top > 0.0 && sv[i] > 1e-11 * top * (a.nrows().max(n) as f64)).collect();
    let r = keep.len();
    let mut ra = DMatrix::zeros(r, n);
    let mut rb = DVector::zeros(r);
    let mut proj = DVector::zeros(a.nrows());
    for (k, &i) in keep.iter().enumerate() {
        let ui = ut.row(i).transpose();
        let ub = ui.dot(b);
        ra.row_mut(k).copy_from(&v.column(i).transpose());
        rb[k] = ub / sv[i];
        proj += &ui * ub;
    }
    if (b - proj).norm() > 1e-9 * (1.0 + b.norm()) {
        return Err(());
    }
    // Null space from a full QR-free construction: complete the basis with an SVD of the projector.
    let z = if r == n {
        DMatrix::zeros(n, 0)
    } else {
        let p = DMatrix::identity(n, n) - ra.transpose() * &ra;
        let e = p.symmetric_eigen();
        let mut cols: Vec<usize> = (0..n).collect();
        cols.sort_by(|&i, &j| e.eigenvalues[j].partial_cmp(&e.eigenvalues[i]).unwrap());
        let mut z = DMatrix::zeros(n, n - r);
        for (k, &i) in cols.iter().take(n - r).enumerate() {
            z.set_column(k, &e.eigenvectors.column(i));
        }
        z
    };
    Ok(EqBasis { a: ra, b: rb, z })
}

struct Kkt<'a> {
    data: &'a Canonical,
    eq: &'a EqBasis,
    off: &'a [usize],
    scal: Vec<BlockScaling>,
    /// `W^{-T} G`
    gs: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Kkt<'a> {
    fn new(data: &'a Canonical, eq: &'a EqBasis, off: &'a [usize], scal: Vec<BlockScaling>) -> Option<Self> {
        let n = data.c.len();
        let mut gs = DMatrix::zeros(data.g.nrows(), n);
        for (i, sc) in scal.iter().enumerate() {
            let (r0, d) = (off[i], off[i + 1] - off[i]);
            gs.rows_mut(r0, d).copy_from(&(sc.w_inv.transpose() * data.g.rows(r0, d)));
        }
        let gz = &gs * &eq.z;
        let mut red = gz.transpose() * &gz;
        let reg = 1e-14 * (1.0 + red.diagonal().amax());
        for i in 0..red.nrows() {
            red[(i, i)] += reg;
        }
        let chol = red.cholesky()?;
        Some(Self { data, eq, off, scal, gs, chol })
    }

    fn blocks_apply(&self, v: &DVector<f64>, f: impl Fn(&BlockScaling, DVector<f64>) -> DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (i, sc) in self.scal.iter().enumerate() {
            let (r0, d) = (self.off[i], self.off[i + 1] - self.off[i]);
            out.rows_mut(r0, d).copy_from(&f(sc, v.rows(r0, d).into_owned()));
        }
        out
    }

    fn w(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blocks_apply(v, |sc, x| &sc.w * x)
    }

    fn wt(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blocks_apply(v, |sc, x| sc.w.tr_mul(&x))
    }

    fn winv(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blocks_apply(v, |sc, x| &sc.w_inv * x)
    }

    fn winv_t(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blocks_apply(v, |sc, x| sc.w_inv.tr_mul(&x))
    }

    /// Solves `A'dy + G'dz = r1`, `A dx = r2`, `G dx - W'W dz = r3`.
    fn solve_once(&self, r1: &DVector<f64>, r2: &DVector<f64>, r3: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let r3s = self.winv_t(r3);
        let rhs1 = r1 + self.gs.tr_mul(&r3s);
        let dxp = self.eq.a.tr_mul(r2);
        let m_dxp = self.gs.tr_mul(&(&self.gs * &dxp));
        let dw = self.chol.solve(&self.eq.z.tr_mul(&(&rhs1 - m_dxp)));
        let dx = dxp + &self.eq.z * dw;
        let gdx = &self.gs * &dx;
        let dy = &self.eq.a * (&rhs1 - self.gs.tr_mul(&gdx));
        let dz = self.winv(&(gdx - r3s));
        (dx, dy, dz)
    }

    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>, r3: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (mut dx, mut dy, mut dz) = self.solve_once(r1, r2, r3);
        let d = self.data;
        let scale = 1.0 + r1.amax().max(r2.amax()).max(r3.amax());
        for _ in 0..2 {
            let e1 = r1 - (self.eq.a.tr_mul(&dy) + d.g.tr_mul(&dz));
            let e2 = r2 - &self.eq.a * &dx;
            let e3 = r3 - (&d.g * &dx - self.wt(&self.w(&dz)));
            let err = e1.amax().max(e2.amax()).max(e3.amax());
            if !(err > 1e-13 * scale) {
                break;
            }
            let (cx, cy, cz) = self.solve_once(&e1, &e2, &e3);
            dx += cx;
            dy += cy;
            dz += cz;
        }
        (dx, dy, dz)
    }
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
    dtau: f64,
    dkappa: f64,
    /// Scaled directions `W^{-T} ds` and `W dz`.
    ds_t: DVector<f64>,
    dz_t: DVector<f64>,
}

#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
    tau: f64,
    kappa: f64,
}

#[derive(Clone)]
struct Residuals {
    rx: DVector<f64>,
    ry: DVector<f64>,
    rz: DVector<f64>,
    rt: f64,
    pres: f64,
    dres: f64,
    gap: f64,
    relgap: Option<f64>,
    pinf: Option<f64>,
    dinf: Option<f64>,
}

fn residuals(d: &Canonical, eq: &EqBasis, it: &Iterate) -> Residuals {
    let hrx = -(eq.a.tr_mul(&it.y) + d.g.tr_mul(&it.z));
    let hry = &eq.a * &it.x;
    let hrz = &it.s + &d.g * &it.x;
    let rx = &hrx - &d.c * it.tau;
    let ry = &hry - &eq.b * it.tau;
    let rz = &hrz - &d.h * it.tau;
    let (cx, by, hz) = (d.c.dot(&it.x), eq.b.dot(&it.y), d.h.dot(&it.z));
    let rt = it.kappa + cx + by + hz;
    let resx0 = d.c.norm().max(1.0);
    let resy0 = eq.b.norm().max(1.0);
    let resz0 = d.h.norm().max(1.0);
    let pres = (ry.norm() / it.tau / resy0).max(rz.norm() / it.tau / resz0);
    let dres = rx.norm() / it.tau / resx0;
    let pcost = cx / it.tau;
    let dcost = -(by + hz) / it.tau;
    let gap = it.s.dot(&it.z) / (it.tau * it.tau);
    let relgap = if pcost < 0.0 {
        Some(gap / -pcost)
    } else if dcost > 0.0 {
        Some(gap / dcost)
    } else {
        None
    };
    let pinf = (hz + by < 0.0).then(|| hrx.norm() / resx0 / (-hz - by));
    let dinf = (cx < 0.0).then(|| (hry.norm() / resy0).max(hrz.norm() / resz0) / -cx);
    Residuals { rx, ry, rz, rt, pres, dres, gap, relgap, pinf, dinf }
}

impl Residuals {
    fn merit(&self) -> f64 {
        let gap = self.relgap.map_or(self.gap, |g| g.min(self.gap));
        self.pres.max(self.dres).max(gap)
    }
}

fn classify(r: &Residuals, tol: f64) -> Option<Status> {
    if r.pres <= tol && r.dres <= tol && (r.gap <= tol || r.relgap.is_some_and(|g| g <= tol)) {
        return Some(Status::Optimal);
    }
    if r.pinf.is_some_and(|p| p <= tol) {
        return Some(Status::Infeasible);
    }
    if r.dinf.is_some_and(|p| p <= tol) {
        return Some(Status::Unbounded);
    }
    None
}

fn shift_into_cone(v: &mut DVector<f64>, cones: &[Cone], off: &[usize]) {
    let mut worst = f64::NEG_INFINITY;
    for (i, c) in cones.iter().enumerate() {
        worst = worst.max(-c.min_eig(&v.as_slice()[off[i]..off[i + 1]]));
    }
    let nrm = v.norm().max(1.0);
    if worst >= -1e-8 * nrm {
        for (i, c) in cones.iter().enumerate() {
            let e = c.identity();
            let mut blk = v.rows_mut(off[i], off[i + 1] - off[i]);
            blk += e * (1.0 + worst);
        }
    }
}

fn identity_scalings(cones: &[Cone]) -> Vec<BlockScaling> {
    cones
        .iter()
        .map(|c| {
            let d = c.dim();
            BlockScaling {
                w: DMatrix::identity(d, d),
                w_inv: DMatrix::identity(d, d),
                lambda: c.identity(),
                psd_eigs: match c {
                    Cone::Psd(n) => Some(DVector::from_element(*n, 1.0)),
                    _ => None,
                },
            }
        })
        .collect()
}

fn initial_point(d: &Canonical, eq: &EqBasis, off: &[usize]) -> Iterate {
    let n = d.c.len();
    let m = d.h.len();
    let unit = || {
        let mut e = DVector::zeros(m);
        for (i, c) in d.cones.iter().enumerate() {
            e.rows_mut(off[i], c.dim()).copy_from(&c.identity());
        }
        e
    };
    let fallback = Iterate {
        x: DVector::zeros(n),
        y: DVector::zeros(eq.b.len()),
        z: unit(),
        s: unit(),
        tau: 1.0,
        kappa: 1.0,
    };
    let Some(kkt) = Kkt::new(d, eq, off, identity_scalings(&d.cones)) else {
        return fallback;
    };
    // Primal: minimize ||s|| subject to Gx + s = h, Ax = b.
    let (x, _, zp) = kkt.solve(&DVector::zeros(n), &eq.b, &d.h);
    let mut s = -zp;
    // Dual: minimize ||z|| subject to G'z + A'y + c = 0.
    let (_, y, mut z) = kkt.solve(&(-&d.c), &DVector::zeros(eq.b.len()), &DVector::zeros(m));
    if [&x, &s, &y, &z].iter().any(|v| v.iter().any(|e| !e.is_finite())) {
        return fallback;
    }
    shift_into_cone(&mut s, &d.cones, off);
    shift_into_cone(&mut z, &d.cones, off);
    Iterate { x, y, z, s, tau: 1.0, kappa: 1.0 }
}

pub fn solve(d: &Canonical, settings: &SolverSettings) -> RawSolution {
    let n = d.c.len();
    let off = d.offsets();
    let m = d.h.len();
    let Ok(eq) = equality_basis(&d.a, &d.b) else {
        return RawSolution {
            status: Status::Infeasible,
            x: DVector::zeros(n),
            s: DVector::zeros(m),
            z: DVector::zeros(m),
            iterations: 0,
            pres: f64::INFINITY,
            dres: f64::INFINITY,
            gap: f64::INFINITY,
        };
    };
    let nu = d.cones.iter().map(|c| c.degree()).sum::<usize>() as f64;
    let mut it = initial_point(d, &eq, &off);
    let mut iterations = 0;
    let mut status = None;
    let mut last = residuals(d, &eq, &it);
    let mut best: Option<(Iterate, Residuals)> = None;
    for k in 0..=settings.max_iter {
        iterations = k;
        last = residuals(d, &eq, &it);
        if let Some(st) = classify(&last, settings.tol) {
            status = Some(st);
            break;
        }
        let merit = last.merit();
        match &best {
            Some((_, b)) if b.merit() <= merit => {
                // Close to the boundary rounding can push the residuals back up; stop once that
                // clearly happens after reaching the acceptance level.
                if b.merit() <= settings.feas_tol && merit > 1e3 * b.merit() {
                    break;
                }
            }
            _ => best = Some((it.clone(), last.clone())),
        }
        if k == settings.max_iter {
            break;
        }
        let mut scal = Vec::with_capacity(d.cones.len());
        for (i, c) in d.cones.iter().enumerate() {
            match nt_scaling(c, &it.s.as_slice()[off[i]..off[i + 1]], &it.z.as_slice()[off[i]..off[i + 1]]) {
                Some(sc) => scal.push(sc),
                None => break,
            }
        }
        if scal.len() != d.cones.len() {
            break;
        }
        let Some(kkt) = Kkt::new(d, &eq, &off, scal) else {
            break;
        };
        let mu = (it.s.dot(&it.z) + it.tau * it.kappa) / (nu + 1.0);
        let (x1, y1, z1) = kkt.solve(&(-&d.c), &eq.b, &d.h);
        let base = d.c.dot(&x1) + eq.b.dot(&y1) + d.h.dot(&z1);

        let lam_sq = blockwise(&kkt, |i, sc| sc.lambda_sq(&d.cones[i]));
        let direction = |sigma: f64, rc: &DVector<f64>, rtc: f64| -> Option<Direction> {
            let f = 1.0 - sigma;
            let t = blockwise(&kkt, |i, sc| sc.lambda_div(&d.cones[i], &rc.as_slice()[off[i]..off[i + 1]]));
            let r3 = -(&last.rz * f) - kkt.wt(&t);
            let (x2, y2, z2) = kkt.solve(&(&last.rx * f), &(-(&last.ry * f)), &r3);
            let denom = -it.kappa / it.tau + base;
            let dtau = (-f * last.rt - rtc / it.tau - d.c.dot(&x2) - eq.b.dot(&y2) - d.h.dot(&z2)) / denom;
            if !dtau.is_finite() {
                return None;
            }
            let dx = x2 + &x1 * dtau;
            let dy = y2 + &y1 * dtau;
            let dz = z2 + &z1 * dtau;
            let dkappa = (rtc - it.kappa * dtau) / it.tau;
            let dz_t = kkt.w(&dz);
            let ds_t = t - &dz_t;
            let ds = kkt.wt(&ds_t);
            Some(Direction { dx, dy, dz, ds, dtau, dkappa, ds_t, dz_t })
        };
        let max_step = |dir: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for (i, sc) in kkt.scal.iter().enumerate() {
                let c = &d.cones[i];
                a = a.min(sc.max_step(c, &dir.ds_t.as_slice()[off[i]..off[i + 1]]));
                a = a.min(sc.max_step(c, &dir.dz_t.as_slice()[off[i]..off[i + 1]]));
            }
            if dir.dtau < 0.0 {
                a = a.min(-it.tau / dir.dtau);
            }
            if dir.dkappa < 0.0 {
                a = a.min(-it.kappa / dir.dkappa);
            }
            a
        };

        let Some(aff) = direction(0.0, &(-&lam_sq), -it.tau * it.kappa) else {
            break;
        };
        let alpha_aff = max_step(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).clamp(0.0, 1.0).powi(3);
        let mut e = DVector::zeros(m);
        for (i, c) in d.cones.iter().enumerate() {
            e.rows_mut(off[i], c.dim()).copy_from(&c.identity());
        }
        let corr = blockwise(&kkt, |i, _| {
            super::cones::circ(&d.cones[i], &aff.ds_t.as_slice()[off[i]..off[i + 1]], &aff.dz_t.as_slice()[off[i]..off[i + 1]])
        });
        let rc = -&lam_sq - corr + e * (sigma * mu);
        let rtc = -it.tau * it.kappa - aff.dtau * aff.dkappa + sigma * mu;
        let Some(dir) = direction(sigma, &rc, rtc) else {
            break;
        };
        let alpha = (settings.step_fraction * max_step(&dir)).min(1.0);
        if !(alpha > 1e-12) {
            break;
        }
        it.x += &dir.dx * alpha;
        it.y += &dir.dy * alpha;
        it.z += &dir.dz * alpha;
        it.s += &dir.ds * alpha;
        it.tau += dir.dtau * alpha;
        it.kappa += dir.dkappa * alpha;
        if !(it.tau > 0.0 && it.kappa > 0.0) || it.x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    if status.is_none() {
        if let Some((b_it, b_res)) = best {
            if classify(&b_res, settings.feas_tol) == Some(Status::Optimal) {
                it = b_it;
                last = b_res;
                status = Some(Status::Optimal);
            }
        }
    }
    let status = status.or_else(|| classify(&last, settings.feas_tol)).unwrap_or(Status::NumericalFailure);
    let (x, s, z) = match status {
        Status::Optimal | Status::NumericalFailure => (&it.x / it.tau, &it.s / it.tau, &it.z / it.tau),
        Status::Infeasible => (DVector::from_element(n, f64::NAN), DVector::zeros(m), &it.z / (-(d.h.dot(&it.z) + eq.b.dot(&it.y)))),
        Status::Unbounded => (&it.x / -d.c.dot(&it.x), &it.s / -d.c.dot(&it.x), DVector::zeros(m)),
    };
    RawSolution { status, x, s, z, iterations, pres: last.pres, dres: last.dres, gap: last.gap }
}

fn blockwise(kkt: &Kkt<'_>, f: impl Fn(usize, &BlockScaling) -> DVector<f64>) -> DVector<f64> {
    let m = *kkt.off.last().unwrap_or(&0);
    let mut out = DVector::zeros(m);
    for (i, sc) in kkt.scal.iter().enumerate() {
        out.rows_mut(kkt.off[i], kkt.off[i + 1] - kkt.off[i]).copy_from(&f(i, sc));
    }
    out
}
