//! Periodic 2-D Daubechies wavelet transform and coarse-level thresholding.
//!
//! Coefficients are stored in the usual in-place pyramid layout on a square
//! `side x side` array (row-major, row = `v`). After the full decomposition
//! the single scaling coefficient sits at `(0, 0)` and the details of level
//! `l` (0 = coarsest) occupy the square of side `2^(l+1)` minus the square
//! of side `2^l`. Thresholding levels `0..=L` therefore zeroes exactly the
//! top-left square of side `2^(L+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;

pub const DEFAULT_FAMILY: usize = 4;

/// Boundary treatment. Only periodic extension keeps the transform
/// orthogonal on every dyadic size, so it is the single option.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Detail along `v`, smooth along `u`.
    Horizontal,
    /// Detail along `u`, smooth along `v`.
    Vertical,
    Diagonal,
}

/// Daubechies reconstruction low-pass filters, indexed by vanishing moments.
const DB: [&[f64]; 10] = [
    &[0.7071067811865476, 0.7071067811865476],
    &[0.48296291314453416, 0.8365163037378079, 0.2241438680420134, -0.12940952255126037],
    &[
        0.33267055295008263, 0.8068915093110925, 0.45987750211849154, -0.13501102001025458, -0.08544127388202666,
        0.03522629188570953,
    ],
    &[
        0.2303778133088965, 0.7148465705529157, 0.6308807679298589, -0.027983769416859854, -0.18703481171909309,
        0.030841381835560764, 0.0328830116668852, -0.010597401785069032,
    ],
    &[
        0.16010239797419293, 0.6038292697971896, 0.7243085284377729, 0.13842814590132074, -0.24229488706638203,
        -0.032244869584638375, 0.07757149384004572, -0.006241490212798274, -0.012580751999081999,
        0.0033357252854737712,
    ],
    &[
        0.11154074335010947, 0.49462389039845306, 0.7511339080210954, 0.31525035170919763, -0.22626469396543983,
        -0.12976686756726194, 0.09750160558732304, 0.027522865530305727, -0.03158203931748603,
        0.0005538422011614961, 0.004777257510945511, -0.0010773010853084796,
    ],
    &[
        0.07785205408500918, 0.3965393194819173, 0.7291320908462351, 0.4697822874051931, -0.14390600392856498,
        -0.22403618499387498, 0.07130921926683026, 0.08061260915108308, -0.03802993693501441,
        -0.01657454163066688, 0.01255099855609984, 0.0004295779729213665, -0.0018016407040474908,
        0.00035371379997452024,
    ],
    &[
        0.05441584224310401, 0.31287159091429995, 0.6756307362972898, 0.5853546836542067, -0.015829105256349306,
        -0.2840155429615469, 0.0004724845739132828, 0.12874742662047847, -0.017369301001807547,
        -0.044088253930794755, 0.013981027917398282, 0.008746094047405777, -0.004870352993451574,
        -0.00039174037337694705, 0.0006754494064505693, -0.00011747678412476953,
    ],
    &[
        0.038077947363878345, 0.24383467461259034, 0.6048231236901112, 0.6572880780513005, 0.13319738582500756,
        -0.2932737832791749, -0.09684078322297646, 0.14854074933810638, 0.03072568147933338,
        -0.06763282906132997, 0.00025094711483145197, 0.022361662123679096, -0.004723204757751397,
        -0.00428150368246343, 0.0018476468830562265, 0.00023038576352319597, -0.0002519631889427101,
        3.93473203162716e-05,
    ],
    &[
        0.026670057900555554, 0.1881768000776915, 0.5272011889317256, 0.6884590394536035, 0.2811723436605775,
        -0.24984642432731538, -0.19594627437737705, 0.12736934033579325, 0.09305736460357235,
        -0.07139414716639708, -0.029457536821875813, 0.033212674059341, 0.0036065535669561697,
        -0.010733175483330575, 0.001395351747052901, 0.001992405295185056, -0.0006858566949597116,
        -0.00011646685512928545, 9.358867032006959e-05, -1.3264202894521244e-05,
    ],
];

#[derive(Clone, Debug)]
struct FilterPair {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl FilterPair {
    fn daubechies(family: usize) -> Result<Self> {
        if !(1..=10).contains(&family) {
            return Err(Error::UnsupportedFamily(family));
        }
        let lo = DB[family - 1].to_vec();
        let len = lo.len();
        let hi = (0..len).map(|j| if j % 2 == 0 { lo[len - 1 - j] } else { -lo[len - 1 - j] }).collect();
        Ok(Self { lo, hi })
    }

    /// One analysis step on `x` (length `n`, even), writing the `n/2`
    /// approximation then the `n/2` details into `out`.
    fn analyze(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let h = n / 2;
        for k in 0..h {
            let (mut a, mut d) = (0.0, 0.0);
            for (j, (lo, hi)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + j) % n];
                a += lo * v;
                d += hi * v;
            }
            out[k] = a;
            out[h + k] = d;
        }
    }

    /// Adjoint of [`analyze`](Self::analyze).
    fn synthesize(&self, c: &[f64], out: &mut [f64]) {
        let n = c.len();
        let h = n / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            let (a, d) = (c[k], c[h + k]);
            for (j, (lo, hi)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * k + j) % n] += lo * a + hi * d;
            }
        }
    }
}

/// Full-depth decomposition of a square dyadic field.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletDecomposition {
    side: usize,
    family: usize,
    boundary: Boundary,
    coeffs: Vec<f64>,
}

impl WaveletDecomposition {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of detail levels `J = log2(side)`.
    pub fn levels(&self) -> usize {
        self.side.trailing_zeros() as usize
    }

    pub fn family(&self) -> usize {
        self.family
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// All coefficients in pyramid layout.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn scaling(&self) -> f64 {
        self.coeffs[0]
    }

    /// Detail coefficients of one level and orientation, row-major.
    pub fn detail(&self, level: usize, orientation: Orientation) -> Result<Vec<f64>> {
        if level >= self.levels() {
            return Err(Error::LevelOutOfRange { level, levels: self.levels() });
        }
        let h = 1usize << level;
        let (r0, c0) = match orientation {
            Orientation::Horizontal => (h, 0),
            Orientation::Vertical => (0, h),
            Orientation::Diagonal => (h, h),
        };
        Ok((r0..r0 + h).flat_map(|r| (c0..c0 + h).map(move |c| (r, c))).map(|(r, c)| self.coeffs[r * self.side + c]).collect())
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// Zeroes the scaling coefficient and every detail at levels `0..=level`.
    pub fn threshold_levels(&self, level: usize) -> Result<Self> {
        let j = self.levels();
        if level >= j {
            return Err(Error::LevelOutOfRange { level, levels: j });
        }
        let mut out = self.clone();
        let block = 2usize << level;
        for r in 0..block {
            out.coeffs[r * self.side..r * self.side + block].iter_mut().for_each(|c| *c = 0.0);
        }
        Ok(out)
    }

    /// Inverse transform back to cell values.
    pub fn reconstruct(&self) -> Vec<f64> {
        let filters = FilterPair::daubechies(self.family).expect("family validated at construction");
        let mut data = self.coeffs.clone();
        let side = self.side;
        let mut line = vec![0.0; side];
        let mut out = vec![0.0; side];
        let mut s = 2;
        while s <= side {
            // Columns first (adjoint of the forward order).
            for c in 0..s {
                for r in 0..s {
                    line[r] = data[r * side + c];
                }
                filters.synthesize(&line[..s], &mut out[..s]);
                for r in 0..s {
                    data[r * side + c] = out[r];
                }
            }
            for r in 0..s {
                let row = &mut data[r * side..r * side + s];
                filters.synthesize(row, &mut out[..s]);
                row.copy_from_slice(&out[..s]);
            }
            s *= 2;
        }
        data
    }
}

/// Number of coefficients removed by thresholding levels `0..=level`.
pub fn removed_count(level: usize) -> usize {
    1usize << (2 * (level + 1))
}

fn dyadic_side(field: &Field) -> Result<usize> {
    let (m, n) = (field.grid().m(), field.grid().n());
    if m != n {
        return Err(Error::InvalidGrid(format!("wavelet transform needs a square field, got {m}x{n}")));
    }
    if !m.is_power_of_two() {
        return Err(Error::NotDyadic(m));
    }
    Ok(m)
}

/// Forward transform to full depth. Masked-out cells enter as zero.
pub fn dwt2(field: &Field, family: usize, boundary: Boundary) -> Result<WaveletDecomposition> {
    let side = dyadic_side(field)?;
    let filters = FilterPair::daubechies(family)?;
    let mut data = field.filled(0.0);
    let mut line = vec![0.0; side];
    let mut out = vec![0.0; side];
    let mut s = side;
    while s >= 2 {
        for r in 0..s {
            let row = &mut data[r * side..r * side + s];
            filters.analyze(row, &mut out[..s]);
            row.copy_from_slice(&out[..s]);
        }
        for c in 0..s {
            for r in 0..s {
                line[r] = data[r * side + c];
            }
            filters.analyze(&line[..s], &mut out[..s]);
            for r in 0..s {
                data[r * side + c] = out[r];
            }
        }
        s /= 2;
    }
    Ok(WaveletDecomposition { side, family, boundary, coeffs: data })
}

/// Pre-adjusted exposure: the field with its scaling content and coarse
/// details (levels `0..=level`) removed.
pub fn wavelet_preadjust(field: &Field, level: usize, family: usize, boundary: Boundary) -> Result<Field> {
    let decomp = dwt2(field, family, boundary)?;
    let values = decomp.threshold_levels(level)?.reconstruct();
    field.with_values(values)
}
