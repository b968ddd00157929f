//! Cross-correlation between every pair of feature maps over a bounded
//! range of shifts.
//!
//! For feature maps `f_i`, `f_j` of size H×W the layer computes
//!
//! ```text
//! C_ij(s, t) = 1/(H·W) · Σ_{x,y} f_i(x − s, y − t) · f_j(x, y),   |s|, |t| ≤ radius
//! ```
//!
//! where `s` shifts rows, `t` shifts columns and samples of `f_i` outside
//! the map are zero. Output channel `p` holds the map of the `p`-th pair
//! (see [`pair_index`]) laid out as a (2r+1)×(2r+1) grid indexed by
//! `(s + r, t + r)`.
//!
//! Because `C_ij(s, t) = C_ji(−s, −t)`, each unordered pair is summed only
//! once: diagonal maps are computed on half the shifts and mirrored, and
//! the reversed pair (in the ordered modes) is the point reflection of its
//! partner. Mirrored entries are copies, so the symmetry holds bit-exactly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which `(i, j)` channel pairs become output channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PairMode {
    /// `i ≤ j`, diagonal included: `C·(C+1)/2` channels.
    #[default]
    Unordered,
    /// `i ≠ j`, both orders: `C·(C−1)` channels.
    OrderedOffDiagonal,
    /// Every `(i, j)`: `C²` channels.
    Ordered,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::Unordered => "unordered",
            PairMode::OrderedOffDiagonal => "ordered-offdiag",
            PairMode::Ordered => "ordered",
        }
    }
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unordered" => Ok(PairMode::Unordered),
            "ordered-offdiag" => Ok(PairMode::OrderedOffDiagonal),
            "ordered" => Ok(PairMode::Ordered),
            other => Err(Error::Config(format!("unknown pair mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorrelationSpec {
    pub radius: usize,
    pub channels: usize,
    pub pair_mode: PairMode,
}

impl CorrelationSpec {
    pub fn new(radius: usize, channels: usize, pair_mode: PairMode) -> Self {
        CorrelationSpec {
            radius,
            channels,
            pair_mode,
        }
    }

    /// Side length of each output map, `2·radius + 1`.
    pub fn extent(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn pair_count(&self) -> usize {
        pair_count(self.channels, self.pair_mode)
    }

    /// Output channels in order: `pairs()[p]` is the `(i, j)` of channel `p`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pairs(self.channels, self.pair_mode)
    }
}

pub fn pair_count(channels: usize, mode: PairMode) -> usize {
    match mode {
        PairMode::Unordered => channels * (channels + 1) / 2,
        PairMode::OrderedOffDiagonal => channels * channels.saturating_sub(1),
        PairMode::Ordered => channels * channels,
    }
}

/// All admissible pairs in output-channel order (row-major over `i`, then `j`).
pub fn pairs(channels: usize, mode: PairMode) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pair_count(channels, mode));
    for i in 0..channels {
        for j in 0..channels {
            let admissible = match mode {
                PairMode::Unordered => i <= j,
                PairMode::OrderedOffDiagonal => i != j,
                PairMode::Ordered => true,
            };
            if admissible {
                out.push((i, j));
            }
        }
    }
    out
}

/// Output channel of pair `(i, j)`.
///
/// The ordering is row-major over `i` then `j`, restricted to the pairs the
/// mode admits. In [`PairMode::Unordered`] only `i ≤ j` is admissible; the
/// map of `(j, i)` is the point reflection of channel `pair_index(i, j)`.
pub fn pair_index(i: usize, j: usize, channels: usize, mode: PairMode) -> Result<usize> {
    if i >= channels || j >= channels {
        return Err(Error::Usage(format!(
            "pair ({i}, {j}) out of range for {channels} channels"
        )));
    }
    match mode {
        // rows a < i contribute C − a pairs each
        PairMode::Unordered if i <= j => Ok(i * channels - i * i.saturating_sub(1) / 2 + (j - i)),
        PairMode::Unordered => Err(Error::Usage(format!(
            "pair ({i}, {j}) is stored as its mirror ({j}, {i}) in unordered mode"
        ))),
        PairMode::OrderedOffDiagonal if i != j => Ok(i * (channels - 1) + if j < i { j } else { j - 1 }),
        PairMode::OrderedOffDiagonal => Err(Error::Usage(format!(
            "diagonal pair ({i}, {i}) is not stored in ordered-offdiag mode"
        ))),
        PairMode::Ordered => Ok(i * channels + j),
    }
}

/// Correlation radius used at pyramid level `level` for an `m`×`m` kernel grid:
/// `floor(2^-level · m / 2)`.
pub fn level_radius(m: usize, level: usize) -> usize {
    m >> (level + 1)
}

fn check<T: Scalar>(x: &Tensor<T>, spec: &CorrelationSpec) -> Result<[usize; 4]> {
    let dims = x.dims4("cross_correlate")?;
    let [_, c, h, w] = dims;
    if c != spec.channels {
        return Err(Error::shape(
            "cross_correlate",
            format!("input has {c} channels, spec expects {}", spec.channels),
        ));
    }
    if spec.radius >= h.min(w) {
        return Err(Error::Config(format!(
            "correlation radius {} must be smaller than the {h}x{w} feature map",
            spec.radius
        )));
    }
    Ok(dims)
}

/// Σ_x,y a(x − s, y − t)·b(x, y) over the overlap of two H×W planes.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, s: isize, t: isize) -> T {
    let (x0, x1) = (s.max(0) as usize, (h as isize + s.min(0)) as usize);
    let (y0, y1) = (t.max(0) as usize, (w as isize + t.min(0)) as usize);
    let mut acc = T::zero();
    for x in x0..x1 {
        let xa = (x as isize - s) as usize;
        let ra = &a[xa * w + (y0 as isize - t) as usize..xa * w + (y1 as isize - t) as usize];
        let rb = &b[x * w + y0..x * w + y1];
        acc += ra.iter().zip(rb).map(|(&p, &q)| p * q).sum::<T>();
    }
    acc
}

/// Full (2r+1)² map of the canonical pair `i ≤ j` for one sample.
fn canonical_map<T: Scalar>(fi: &[T], fj: &[T], h: usize, w: usize, r: usize, diagonal: bool, norm: T) -> Vec<T> {
    let e = 2 * r + 1;
    let ri = r as isize;
    let mut map = vec![T::zero(); e * e];
    for s in -ri..=ri {
        for t in -ri..=ri {
            // second half of the diagonal map is filled by mirroring below
            if diagonal && (s < 0 || (s == 0 && t < 0)) {
                continue;
            }
            map[((s + ri) as usize) * e + (t + ri) as usize] = shifted_dot(fi, fj, h, w, s, t) * norm;
        }
    }
    if diagonal {
        for idx in 0..e * e / 2 {
            map[idx] = map[e * e - 1 - idx];
        }
    }
    map
}

pub(crate) fn correlate_forward<T: Scalar>(x: &Tensor<T>, spec: &CorrelationSpec) -> Result<Tensor<T>> {
    let [n, c, h, w] = check(x, spec)?;
    let e = spec.extent();
    let plane = h * w;
    let norm = T::one() / T::from_usize(plane).unwrap();
    let out_pairs = spec.pairs();
    let canon: Vec<(usize, usize)> = pairs(c, PairMode::Unordered)
        .into_iter()
        .filter(|&(i, j)| i != j || spec.pair_mode != PairMode::OrderedOffDiagonal)
        .collect();
    let per_sample = out_pairs.len() * e * e;
    let mut out = vec![T::zero(); n * per_sample];
    out.par_chunks_mut(per_sample.max(1))
        .enumerate()
        .for_each(|(sample, dst)| {
            let feats = &x.data()[sample * c * plane..(sample + 1) * c * plane];
            let maps: Vec<Vec<T>> = canon
                .iter()
                .map(|&(i, j)| {
                    canonical_map(
                        &feats[i * plane..(i + 1) * plane],
                        &feats[j * plane..(j + 1) * plane],
                        h,
                        w,
                        spec.radius,
                        i == j,
                        norm,
                    )
                })
                .collect();
            let lookup = |i: usize, j: usize| canon.iter().position(|&p| p == (i, j)).unwrap();
            for (p, &(i, j)) in out_pairs.iter().enumerate() {
                let slot = &mut dst[p * e * e..(p + 1) * e * e];
                if i <= j {
                    slot.copy_from_slice(&maps[lookup(i, j)]);
                } else {
                    for (d, &v) in slot.iter_mut().zip(maps[lookup(j, i)].iter().rev()) {
                        *d = v;
                    }
                }
            }
        });
    Tensor::new([n, out_pairs.len(), e, e], out)
}

pub(crate) fn correlate_backward<T: Scalar>(x: &Tensor<T>, spec: &CorrelationSpec, g: &[T]) -> Vec<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let e = spec.extent();
    let r = spec.radius as isize;
    let norm = T::one() / T::from_usize(plane).unwrap();
    let out_pairs = spec.pairs();
    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut(c * plane)
        .enumerate()
        .take(n)
        .for_each(|(sample, gfeat)| {
            let feats = &x.data()[sample * c * plane..(sample + 1) * c * plane];
            let gs = &g[sample * out_pairs.len() * e * e..(sample + 1) * out_pairs.len() * e * e];
            // fold every output map onto its canonical pair i ≤ j
            let mut canon: Vec<((usize, usize), Vec<T>)> = Vec::new();
            for (p, &(i, j)) in out_pairs.iter().enumerate() {
                let gmap = &gs[p * e * e..(p + 1) * e * e];
                let key = (i.min(j), i.max(j));
                let slot = match canon.iter().position(|(k, _)| *k == key) {
                    Some(idx) => idx,
                    None => {
                        canon.push((key, vec![T::zero(); e * e]));
                        canon.len() - 1
                    }
                };
                let acc = &mut canon[slot].1;
                if i <= j {
                    for (a, &v) in acc.iter_mut().zip(gmap) {
                        *a += v;
                    }
                } else {
                    for (a, &v) in acc.iter_mut().zip(gmap.iter().rev()) {
                        *a += v;
                    }
                }
            }
            for ((i, j), gmap) in canon {
                for si in -r..=r {
                    for ti in -r..=r {
                        let gv = gmap[((si + r) as usize) * e + (ti + r) as usize] * norm;
                        if gv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = (si.max(0) as usize, (h as isize + si.min(0)) as usize);
                        let (y0, y1) = (ti.max(0) as usize, (w as isize + ti.min(0)) as usize);
                        for xr in x0..x1 {
                            let xa = (xr as isize - si) as usize;
                            let a0 = xa * w + (y0 as isize - ti) as usize;
                            let b0 = xr * w + y0;
                            let len = y1 - y0;
                            // d/d f_i(x−s, y−t) = g·f_j(x, y); d/d f_j(x, y) = g·f_i(x−s, y−t)
                            for k in 0..len {
                                let fa = feats[i * plane + a0 + k];
                                let fb = feats[j * plane + b0 + k];
                                gfeat[i * plane + a0 + k] += gv * fb;
                                gfeat[j * plane + b0 + k] += gv * fa;
                            }
                        }
                    }
                }
            }
        });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pair_is_zero() {
        for mode in [PairMode::Unordered, PairMode::Ordered] {
            assert_eq!(pair_index(0, 0, 5, mode).unwrap(), 0);
        }
        assert_eq!(pair_index(0, 1, 5, PairMode::OrderedOffDiagonal).unwrap(), 0);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(pair_count(32, PairMode::Unordered), 528);
        assert_eq!(pair_count(32, PairMode::OrderedOffDiagonal), 992);
        assert_eq!(pair_count(32, PairMode::Ordered), 1024);
    }

    #[test]
    fn pair_index_matches_enumeration() {
        for mode in [PairMode::Unordered, PairMode::OrderedOffDiagonal, PairMode::Ordered] {
            for c in 1..10 {
                for (p, (i, j)) in pairs(c, mode).into_iter().enumerate() {
                    assert_eq!(pair_index(i, j, c, mode).unwrap(), p, "{mode:?} c={c} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn out_of_range_pair_is_usage_error() {
        assert!(matches!(pair_index(3, 0, 3, PairMode::Ordered), Err(Error::Usage(_))));
        assert!(matches!(pair_index(2, 1, 3, PairMode::Unordered), Err(Error::Usage(_))));
    }

    #[test]
    fn radius_too_large_is_config_error() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let spec = CorrelationSpec::new(4, 1, PairMode::Unordered);
        assert!(matches!(correlate_forward(&x, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn level_radii_halve() {
        assert_eq!((0..3).map(|l| level_radius(85, l)).collect::<Vec<_>>(), [42, 21, 10]);
        assert_eq!((0..3).map(|l| level_radius(17, l)).collect::<Vec<_>>(), [8, 4, 2]);
    }
}
