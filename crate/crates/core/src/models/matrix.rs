use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GaussianModel;
use crate::error::{Error, Result};

/// `(view, frame)` position of one entry in the matrix.
pub type Entry = (usize, usize);

/// Shape of a view × frame matrix of `entry_dim`-vectors, and the row-major
/// flat index map `((view * frames) + frame) * entry_dim + coord`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixLayout {
    pub views: usize,
    pub frames: usize,
    pub entry_dim: usize,
}

impl MatrixLayout {
    pub fn new(views: usize, frames: usize, entry_dim: usize) -> Result<Self> {
        if views == 0 || frames == 0 || entry_dim == 0 {
            return Err(Error::invalid(format!(
                "matrix layout must be non-empty, got {views}x{frames}x{entry_dim}"
            )));
        }
        Ok(Self {
            views,
            frames,
            entry_dim,
        })
    }

    pub fn n_entries(&self) -> usize {
        self.views * self.frames
    }

    /// Total number of scalar coordinates.
    pub fn dim(&self) -> usize {
        self.n_entries() * self.entry_dim
    }

    pub fn check_entry(&self, (i, j): Entry) -> Result<()> {
        if i < self.views && j < self.frames {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange(format!(
                "entry ({i}, {j}) outside a {}x{} matrix",
                self.views, self.frames
            )))
        }
    }

    pub fn entry_index(&self, (i, j): Entry) -> usize {
        i * self.frames + j
    }

    pub fn entry_at(&self, index: usize) -> Entry {
        (index / self.frames, index % self.frames)
    }

    pub fn flat(&self, entry: Entry, coord: usize) -> usize {
        self.entry_index(entry) * self.entry_dim + coord
    }

    /// Inverse of [`MatrixLayout::flat`].
    pub fn unflat(&self, flat: usize) -> (Entry, usize) {
        (self.entry_at(flat / self.entry_dim), flat % self.entry_dim)
    }

    pub fn coords(&self, entry: Entry) -> std::ops::Range<usize> {
        let start = self.flat(entry, 0);
        start..start + self.entry_dim
    }

    pub fn coords_of(&self, entries: &[Entry]) -> Vec<usize> {
        entries.iter().flat_map(|&e| self.coords(e)).collect()
    }

    /// Entries of view `i` across all frames.
    pub fn row_entries(&self, i: usize) -> Vec<Entry> {
        (0..self.frames).map(|j| (i, j)).collect()
    }

    /// Entries of frame `j` across all views.
    pub fn col_entries(&self, j: usize) -> Vec<Entry> {
        (0..self.views).map(|i| (i, j)).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = Entry> + '_ {
        (0..self.views).flat_map(move |i| (0..self.frames).map(move |j| (i, j)))
    }
}

/// Joint Gaussian over every coordinate of a latent matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixGaussianModel {
    layout: MatrixLayout,
    joint: GaussianModel,
}

impl MatrixGaussianModel {
    pub fn new(layout: MatrixLayout, joint: GaussianModel) -> Result<Self> {
        if joint.dim() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: joint.dim(),
            });
        }
        Ok(Self { layout, joint })
    }

    pub fn layout(&self) -> MatrixLayout {
        self.layout
    }

    pub fn joint(&self) -> &GaussianModel {
        &self.joint
    }

    pub fn noised(&self, sigma: f64) -> Result<Self> {
        Ok(Self {
            layout: self.layout,
            joint: self.joint.noised(sigma)?,
        })
    }

    pub fn marginal(&self, entries: &[Entry]) -> Result<GaussianModel> {
        if entries.is_empty() {
            return Err(Error::invalid("empty entry set"));
        }
        for (k, &e) in entries.iter().enumerate() {
            self.layout.check_entry(e)?;
            if entries[..k].contains(&e) {
                return Err(Error::invalid(format!("entry {e:?} listed twice")));
            }
        }
        self.joint.select(&self.layout.coords_of(entries))
    }

    pub fn row_marginal(&self, i: usize) -> Result<GaussianModel> {
        self.marginal(&self.layout.row_entries(i))
    }

    pub fn col_marginal(&self, j: usize) -> Result<GaussianModel> {
        self.marginal(&self.layout.col_entries(j))
    }

    pub fn entry_marginal(&self, e: Entry) -> Result<GaussianModel> {
        self.marginal(&[e])
    }

    fn block(&self, a: Entry, b: Entry) -> DMatrix<f64> {
        let ra = self.layout.coords(a);
        let rb = self.layout.coords(b);
        self.joint
            .covariance()
            .view((ra.start, rb.start), (ra.len(), rb.len()))
            .into_owned()
    }

    /// Cov(a, b | given) by Schur complement.
    pub fn partial_covariance(&self, a: Entry, b: Entry, given: Entry) -> Result<DMatrix<f64>> {
        for e in [a, b, given] {
            self.layout.check_entry(e)?;
        }
        if a == b || a == given || b == given {
            return Err(Error::invalid("partial covariance needs three distinct entries"));
        }
        let gg = super::gaussian::factorize(&self.block(given, given))?;
        let correction = self.block(a, given) * gg.solve(&self.block(given, b));
        Ok(self.block(a, b) - correction)
    }
}

pub fn marginal(model: &MatrixGaussianModel, entries: &[Entry]) -> Result<GaussianModel> {
    model.marginal(entries)
}

pub fn partial_covariance(model: &MatrixGaussianModel, a: Entry, b: Entry, given: Entry) -> Result<DMatrix<f64>> {
    model.partial_covariance(a, b, given)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block_diag(layout: MatrixLayout) -> MatrixGaussianModel {
        let n = layout.dim();
        let cov = DMatrix::from_fn(n, n, |r, c| {
            let (er, kr) = layout.unflat(r);
            let (ec, kc) = layout.unflat(c);
            if er != ec {
                0.0
            } else if kr == kc {
                1.0 + layout.entry_index(er) as f64
            } else {
                0.3
            }
        });
        let mean = (0..n).map(|k| k as f64 * 0.1).collect();
        MatrixGaussianModel::new(layout, GaussianModel::from_parts(mean, cov).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn index_map_round_trips(v in 1usize..6, f in 1usize..6, d in 1usize..4, seed in 0usize..1000) {
            let layout = MatrixLayout::new(v, f, d).unwrap();
            let flat = seed % layout.dim();
            let (e, k) = layout.unflat(flat);
            prop_assert_eq!(layout.flat(e, k), flat);
            prop_assert!(layout.check_entry(e).is_ok());
        }

        #[test]
        fn marginal_of_marginal(picks in proptest::collection::vec(0usize..12, 1..8), keep in 0usize..64) {
            let layout = MatrixLayout::new(3, 4, 2).unwrap();
            let model = block_diag(layout);
            let mut a: Vec<Entry> = picks.iter().map(|&p| layout.entry_at(p)).collect();
            a.sort_unstable();
            a.dedup();
            let b: Vec<usize> = (0..a.len()).filter(|k| keep >> (k % 6) & 1 == 1 || *k == 0).collect();
            let sub_a = model.marginal(&a).unwrap();
            let coords_b: Vec<usize> = b.iter().flat_map(|&k| k * 2..k * 2 + 2).collect();
            let twice = sub_a.select(&coords_b).unwrap();
            let entries_b: Vec<Entry> = b.iter().map(|&k| a[k]).collect();
            let direct = model.marginal(&entries_b).unwrap();
            prop_assert_eq!(twice.mean(), direct.mean());
            prop_assert_eq!(twice.covariance(), direct.covariance());
        }
    }

    #[test]
    fn duplicate_entries_rejected() {
        let layout = MatrixLayout::new(2, 2, 1).unwrap();
        assert!(block_diag(layout).marginal(&[(0, 1), (1, 0), (0, 1)]).is_err());
    }

    #[test]
    fn full_marginal_is_joint() {
        let layout = MatrixLayout::new(2, 3, 2).unwrap();
        let m = block_diag(layout);
        let all: Vec<Entry> = layout.entries().collect();
        let g = m.marginal(&all).unwrap();
        assert_eq!(g.covariance(), m.joint().covariance());
        assert_eq!(g.mean(), m.joint().mean());
    }

    #[test]
    fn single_entry_of_block_diagonal() {
        let layout = MatrixLayout::new(2, 2, 2).unwrap();
        let m = block_diag(layout);
        let g = m.entry_marginal((1, 0)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[3.0, 0.3, 0.3, 3.0]);
        assert_eq!(g.covariance(), &expect);
        assert!(m.entry_marginal((2, 0)).is_err());
        assert!(m.marginal(&[]).is_err());
    }

    #[test]
    fn independent_partial_covariance_is_zero() {
        let layout = MatrixLayout::new(2, 2, 2).unwrap();
        let m = block_diag(layout);
        let pc = m.partial_covariance((0, 1), (1, 0), (0, 0)).unwrap();
        assert_eq!(pc.abs().max(), 0.0);
        assert!(m.partial_covariance((0, 1), (0, 1), (0, 0)).is_err());
        assert!(m.partial_covariance((0, 1), (1, 0), (0, 1)).is_err());
    }

    #[test]
    fn row_and_col_entries() {
        let layout = MatrixLayout::new(2, 3, 1).unwrap();
        assert_eq!(layout.row_entries(1), vec![(1, 0), (1, 1), (1, 2)]);
        assert_eq!(layout.col_entries(2), vec![(0, 2), (1, 2)]);
        assert_eq!(layout.coords((1, 2)), 5..6);
        assert!(MatrixLayout::new(0, 1, 1).is_err());
    }
}
