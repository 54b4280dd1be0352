//! Block-tridiagonal complex matrices and their block LU factorization.
//!
//! Every matrix in the scheme couples only neighbouring x1 planes, so the
//! global operators are block-tridiagonal with dense blocks of size `J_2 - 1`
//! (size 1 in 1D). The transparent boundary coupling is dense within the
//! first and last diagonal blocks and leaves the band intact.

use nalgebra::{DMatrix, DVector, LU};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiag {
    block: usize,
    diag: Vec<DMatrix<C64>>,
    /// `lower[i]` sits at block position `(i + 1, i)`.
    lower: Vec<DMatrix<C64>>,
    /// `upper[i]` sits at block position `(i, i + 1)`.
    upper: Vec<DMatrix<C64>>,
}

impl BlockTridiag {
    pub fn zeros(blocks: usize, block: usize) -> Self {
        let z = DMatrix::zeros(block, block);
        Self {
            block,
            diag: vec![z.clone(); blocks],
            lower: vec![z.clone(); blocks.saturating_sub(1)],
            upper: vec![z; blocks.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn dim(&self) -> usize {
        self.blocks() * self.block
    }

    fn slot(&mut self, row: usize, col: usize) -> &mut C64 {
        let (bi, ri) = (row / self.block, row % self.block);
        let (bj, cj) = (col / self.block, col % self.block);
        if bi == bj {
            &mut self.diag[bi][(ri, cj)]
        } else if bi == bj + 1 {
            &mut self.lower[bj][(ri, cj)]
        } else if bj == bi + 1 {
            &mut self.upper[bi][(ri, cj)]
        } else {
            panic!("entry ({row}, {col}) outside the block band")
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: C64) {
        *self.slot(row, col) += value;
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        let (bi, ri) = (row / self.block, row % self.block);
        let (bj, cj) = (col / self.block, col % self.block);
        if bi == bj {
            self.diag[bi][(ri, cj)]
        } else if bi == bj + 1 {
            self.lower[bj][(ri, cj)]
        } else if bj == bi + 1 {
            self.upper[bi][(ri, cj)]
        } else {
            C64::new(0.0, 0.0)
        }
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<C64> {
        &self.diag[i]
    }

    pub fn add_to_diag_block(&mut self, i: usize, m: &DMatrix<C64>) {
        self.diag[i] += m;
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: C64, other: &BlockTridiag, b: C64) -> BlockTridiag {
        assert_eq!(self.blocks(), other.blocks());
        assert_eq!(self.block, other.block);
        let mix = |x: &[DMatrix<C64>], y: &[DMatrix<C64>]| -> Vec<DMatrix<C64>> {
            x.iter().zip(y).map(|(p, q)| p * a + q * b).collect()
        };
        BlockTridiag {
            block: self.block,
            diag: mix(&self.diag, &other.diag),
            lower: mix(&self.lower, &other.lower),
            upper: mix(&self.upper, &other.upper),
        }
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.dim());
        let b = self.block;
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        let seg = |i: usize| &x[i * b..(i + 1) * b];
        let acc = |out: &mut [C64], m: &DMatrix<C64>, v: &[C64]| {
            for r in 0..b {
                let mut s = C64::new(0.0, 0.0);
                for c in 0..b {
                    s += m[(r, c)] * v[c];
                }
                out[r] += s;
            }
        };
        for i in 0..self.blocks() {
            let out = &mut y[i * b..(i + 1) * b];
            acc(out, &self.diag[i], seg(i));
            if i > 0 {
                acc(out, &self.lower[i - 1], seg(i - 1));
            }
            if i + 1 < self.blocks() {
                acc(out, &self.upper[i], seg(i + 1));
            }
        }
        y
    }

    /// `x^H A y`.
    pub fn form(&self, x: &[C64], y: &[C64]) -> C64 {
        let ay = self.mul_vec(y);
        x.iter().zip(&ay).map(|(a, b)| a.conj() * b).sum()
    }

    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in &self.diag {
            worst = worst.max((d - d.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            worst = worst.max((l - u.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.dim();
        let b = self.block;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..self.blocks() {
            m.view_mut((i * b, i * b), (b, b)).copy_from(&self.diag[i]);
            if i + 1 < self.blocks() {
                m.view_mut(((i + 1) * b, i * b), (b, b)).copy_from(&self.lower[i]);
                m.view_mut((i * b, (i + 1) * b), (b, b)).copy_from(&self.upper[i]);
            }
        }
        m
    }

    /// Nonzero entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, C64)> {
        let b = self.block;
        let mut out = Vec::new();
        let mut push = |bi: usize, bj: usize, m: &DMatrix<C64>| {
            for r in 0..b {
                for c in 0..b {
                    let v = m[(r, c)];
                    if v != C64::new(0.0, 0.0) {
                        out.push((bi * b + r, bj * b + c, v));
                    }
                }
            }
        };
        for i in 0..self.blocks() {
            if i > 0 {
                push(i, i - 1, &self.lower[i - 1]);
            }
            push(i, i, &self.diag[i]);
            if i + 1 < self.blocks() {
                push(i, i + 1, &self.upper[i]);
            }
        }
        out.sort_by_key(|&(r, c, _)| (r, c));
        out
    }

    /// Replaces the rows and columns of the given planes by the identity,
    /// which imposes homogeneous Dirichlet values there.
    pub fn pin_planes(&mut self, planes: &[usize]) {
        let b = self.block;
        let nb = self.blocks();
        for &p in planes {
            self.diag[p] = DMatrix::identity(b, b);
            if p > 0 {
                self.lower[p - 1].fill(C64::new(0.0, 0.0));
                self.upper[p - 1].fill(C64::new(0.0, 0.0));
            }
            if p + 1 < nb {
                self.upper[p].fill(C64::new(0.0, 0.0));
                self.lower[p].fill(C64::new(0.0, 0.0));
            }
        }
    }

    /// Block LU (block Thomas) factorization with partial pivoting inside blocks.
    pub fn factor(&self) -> Result<BlockLu> {
        let nb = self.blocks();
        let mut pivots: Vec<LU<C64, nalgebra::Dyn, nalgebra::Dyn>> = Vec::with_capacity(nb);
        let mut solved_upper = Vec::with_capacity(nb.saturating_sub(1));
        let scale = self
            .diag
            .iter()
            .flat_map(|d| d.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for i in 0..nb {
            let mut d = self.diag[i].clone();
            if i > 0 {
                let g: &DMatrix<C64> = &solved_upper[i - 1];
                d -= &self.lower[i - 1] * g;
            }
            let lu = d.lu();
            let u = lu.u();
            let min_pivot = u.diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
            if !(min_pivot > 1e-14 * scale) {
                return Err(Error::SolveFailure(format!(
                    "pivot {min_pivot:e} in block {i} is negligible"
                )));
            }
            if i + 1 < nb {
                let g = lu
                    .solve(&self.upper[i])
                    .ok_or_else(|| Error::SolveFailure(format!("singular block {i}")))?;
                solved_upper.push(g);
            }
            pivots.push(lu);
        }
        Ok(BlockLu {
            block: self.block,
            pivots,
            solved_upper,
            lower: self.lower.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlockLu {
    block: usize,
    pivots: Vec<LU<C64, nalgebra::Dyn, nalgebra::Dyn>>,
    solved_upper: Vec<DMatrix<C64>>,
    lower: Vec<DMatrix<C64>>,
}

impl BlockLu {
    pub fn solve(&self, rhs: &[C64]) -> Result<Vec<C64>> {
        let b = self.block;
        let nb = self.pivots.len();
        if rhs.len() != nb * b {
            return Err(Error::LengthMismatch {
                expected: nb * b,
                actual: rhs.len(),
            });
        }
        let mut x = DVector::from_column_slice(rhs);
        for i in 0..nb {
            if i > 0 {
                let prev = x.rows((i - 1) * b, b).clone_owned();
                let mut seg = x.rows_mut(i * b, b);
                seg.gemv(C64::new(-1.0, 0.0), &self.lower[i - 1], &prev, C64::new(1.0, 0.0));
            }
            let mut seg = x.rows_mut(i * b, b);
            if !self.pivots[i].solve_mut(&mut seg) {
                return Err(Error::SolveFailure(format!("singular block {i}")));
            }
        }
        for i in (0..nb.saturating_sub(1)).rev() {
            let next = x.rows((i + 1) * b, b).clone_owned();
            let mut seg = x.rows_mut(i * b, b);
            seg.gemv(C64::new(-1.0, 0.0), &self.solved_upper[i], &next, C64::new(1.0, 0.0));
        }
        if x.iter().any(|z| !z.is_finite()) {
            return Err(Error::SolveFailure("non-finite solution".into()));
        }
        Ok(x.as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(nb: usize, b: usize, seed: u64) -> BlockTridiag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = BlockTridiag::zeros(nb, b);
        let n = nb * b;
        for r in 0..n {
            for c in 0..n {
                if (r / b).abs_diff(c / b) <= 1 {
                    a.add(r, c, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
                }
            }
            a.add(r, r, C64::new(0.0, 3.0 * b as f64 + 3.0));
        }
        a
    }

    #[test]
    fn solve_matches_dense_lu() {
        for (nb, b) in [(7, 1), (5, 3), (4, 6)] {
            let a = random_system(nb, b, 7 + b as u64);
            let rhs: Vec<C64> = (0..nb * b).map(|i| C64::new(i as f64, 1.0 - i as f64)).collect();
            let x = a.factor().unwrap().solve(&rhs).unwrap();
            let dense = a.to_dense().lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
            for (u, v) in x.iter().zip(dense.iter()) {
                assert!((u - v).norm() < 1e-12 * (1.0 + v.norm()));
            }
            let back = a.mul_vec(&x);
            for (u, v) in back.iter().zip(&rhs) {
                assert!((u - v).norm() < 1e-11 * (1.0 + v.norm()));
            }
        }
    }

    #[test]
    fn pinned_planes_are_identity_rows() {
        let mut a = random_system(4, 2, 3);
        a.pin_planes(&[0, 3]);
        let rhs = vec![C64::new(1.0, 0.0); 8];
        let mut r = rhs.clone();
        for v in r.iter_mut().take(2) {
            *v = C64::new(0.0, 0.0);
        }
        let x = a.factor().unwrap().solve(&r).unwrap();
        assert_eq!(x[0], C64::new(0.0, 0.0));
        assert!(a.get(2, 1) == C64::new(0.0, 0.0));
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = BlockTridiag::zeros(3, 2);
        assert!(matches!(a.factor(), Err(Error::SolveFailure(_))));
    }

    #[test]
    fn triplets_and_hermitian_defect() {
        let mut a = BlockTridiag::zeros(2, 1);
        a.add(0, 1, C64::new(1.0, 2.0));
        a.add(1, 0, C64::new(1.0, -2.0));
        a.add(0, 0, C64::new(3.0, 0.0));
        assert_eq!(a.hermitian_defect(), 0.0);
        assert_eq!(a.triplets().len(), 3);
        a.add(1, 1, C64::new(0.0, 1.0));
        assert_eq!(a.hermitian_defect(), 2.0);
    }
}
