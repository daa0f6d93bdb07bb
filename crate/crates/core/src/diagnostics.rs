//! Feature-space analysis: covariance eigenspectra, numerical ranks, rank
//! deficits, and the range/null-space decomposition of backbone features
//! under the head's linear map.
//!
//! Everything here is a pure function over matrices. [`analyze`] bundles the
//! individual measurements into one serializable [`DiagnosticsReport`] plus
//! the decomposed feature matrices for downstream evaluation.

use crate::error::{Error, Result};
use crate::linalg::{singular_values, svd};
use crate::models::{Head, HeadKind};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which representation a feature matrix samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    /// Backbone output.
    H,
    /// Head output.
    Z,
    /// Range component of the backbone features under the head's map.
    Hr,
    /// Null-space component.
    Hn,
}

impl SpaceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceTag::H => "h",
            SpaceTag::Z => "z",
            SpaceTag::Hr => "h_r",
            SpaceTag::Hn => "h_n",
        }
    }
}

/// An `N x q` matrix of per-example features with its provenance.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<S: Real = f64> {
    data: Tensor<S>,
    space: SpaceTag,
    checkpoint: String,
}

impl<S: Real> FeatureMatrix<S> {
    /// Validates shape (at least two rows, at least one column) and
    /// finiteness.
    pub fn new(data: Tensor<S>, space: SpaceTag, checkpoint: impl Into<String>) -> Result<Self> {
        if data.rows() < 2 || data.cols() == 0 {
            return Err(Error::InvalidArg(format!(
                "feature matrix must be at least 2 x 1, got {} x {}",
                data.rows(),
                data.cols()
            )));
        }
        if !data.is_all_finite() {
            return Err(Error::InvalidArg(format!(
                "feature matrix for space '{}' contains non-finite entries",
                space.as_str()
            )));
        }
        Ok(FeatureMatrix { data, space, checkpoint: checkpoint.into() })
    }

    pub fn data(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn space(&self) -> SpaceTag {
        self.space
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn q(&self) -> usize {
        self.data.cols()
    }
}

/// Eigenvalues of a feature covariance with the matching numerical rank.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumReport {
    /// All `q` covariance eigenvalues, descending, clamped non-negative.
    pub eigenvalues: Vec<f64>,
    /// Count of centered-matrix singular values above `tolerance`.
    pub rank: usize,
    /// The rank threshold actually used.
    pub tolerance: f64,
}

/// Eigenvalues of the feature covariance `C = F̃ᵀF̃ / (N − 1)` where `F̃` is
/// the row-mean-centered feature matrix.
///
/// Computed from the singular values of `F̃` (never by forming `C`): the
/// eigenvalues are the squared singular values over `N − 1`, padded with
/// zeros up to `q` and clamped non-negative. The report's rank counts
/// singular values above the default [`numerical_rank`] tolerance, so it is
/// at most `min(N − 1, q)` — centering removes one dimension.
pub fn covariance_spectrum<S: Real>(features: &FeatureMatrix<S>) -> Result<SpectrumReport> {
    let (centered, _means) = features.data().center_columns();
    let sigma = singular_values(&centered)?;
    let n = features.n();
    let q = features.q();
    let divisor = (n - 1) as f64;
    let mut eigenvalues: Vec<f64> =
        sigma.iter().map(|s| (s.as_f64().powi(2) / divisor).max(0.0)).collect();
    eigenvalues.resize(q, 0.0);

    let tolerance = default_rank_tolerance(sigma.first().copied().unwrap_or(S::zero()), n, q);
    let rank = sigma.iter().filter(|s| s.as_f64() > tolerance).count();
    Ok(SpectrumReport { eigenvalues, rank, tolerance })
}

fn default_rank_tolerance<S: Real>(sigma_max: S, rows: usize, cols: usize) -> f64 {
    sigma_max.as_f64() * rows.max(cols) as f64 * S::epsilon().as_f64()
}

/// Count of singular values above `tol`; the default threshold is
/// `σ_max · max(rows, cols) · ε` for the scalar's machine epsilon ε, the
/// usual matrix-rank convention.
pub fn numerical_rank<S: Real>(matrix: &Tensor<S>, tol: Option<f64>) -> Result<usize> {
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(Error::InvalidArg("rank of an empty matrix is undefined".into()));
    }
    let sigma = singular_values(matrix)?;
    let threshold = tol.unwrap_or_else(|| {
        default_rank_tolerance(
            sigma.first().copied().unwrap_or(S::zero()),
            matrix.rows(),
            matrix.cols(),
        )
    });
    Ok(sigma.iter().filter(|s| s.as_f64() > threshold).count())
}

/// `rank(H) − rank(Z)` at default tolerances. Negative values are possible
/// in pathological runs and reported as-is.
pub fn rank_deficit<S: Real>(h: &FeatureMatrix<S>, z: &FeatureMatrix<S>) -> Result<i64> {
    if h.n() != z.n() {
        return Err(Error::ShapeMismatch(format!(
            "feature matrices pair rows 1:1, got {} vs {}",
            h.n(),
            z.n()
        )));
    }
    let rank_h = numerical_rank(h.data(), None)? as i64;
    let rank_z = numerical_rank(z.data(), None)? as i64;
    Ok(rank_h - rank_z)
}

/// Right-rank guard shared by the pseudo-inverse and the decomposition:
/// returns the SVD after verifying `a` (d×m) has full row rank d.
fn full_row_rank_svd<S: Real>(a: &Tensor<S>) -> Result<crate::linalg::Svd<S>> {
    let (d, m) = a.shape();
    if d == 0 || m == 0 {
        return Err(Error::InvalidArg("pseudo-inverse of an empty matrix is undefined".into()));
    }
    let decomp = svd(a)?;
    let sigma_max = decomp.sigma.first().copied().unwrap_or(S::zero());
    let tol = default_rank_tolerance(sigma_max, d, m);
    let sigma_min = if d > m { S::zero() } else { decomp.sigma[d - 1] };
    if sigma_min.as_f64() <= tol {
        return Err(Error::RankDeficient { sigma_min: sigma_min.as_f64(), tol });
    }
    Ok(decomp)
}

/// Moore–Penrose right inverse `A⁺ = Aᵀ(AAᵀ)⁻¹` of a full-row-rank `d x m`
/// matrix, computed through the SVD (`A⁺ = V Σ⁻¹ Uᵀ`, no normal equations).
/// Satisfies `A · A⁺ = I_d` to well below 1e-8.
pub fn right_pseudo_inverse<S: Real>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (d, m) = a.shape();
    let decomp = full_row_rank_svd(a)?;
    // V diag(1/σ) Uᵀ with V: m×d, U: d×d.
    let mut out = Tensor::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            let mut acc = S::zero();
            for r in 0..d {
                acc += decomp.v.get(i, r) / decomp.sigma[r] * decomp.u.get(j, r);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Splits features into their range and null-space components under `a`:
/// `h_r` is the orthogonal projection of each row of `h` onto the row space
/// of `a` (equivalently `A⁺A h` per column vector), and `h_n = h − h_r`.
/// Rows of `h_n` are annihilated by `a` and orthogonal to the matching rows
/// of `h_r`. Requires `a` to have full row rank; `h` is `N x m` (a single
/// vector is a one-row matrix).
pub fn null_space_decompose<S: Real>(
    a: &Tensor<S>,
    h: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (d, m) = a.shape();
    if h.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, map expects {m}",
            h.cols()
        )));
    }
    let decomp = full_row_rank_svd(a)?;
    // Projector onto the row space: V_d V_dᵀ, applied as (h V) Vᵀ.
    let mut v_d = Tensor::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            v_d.set(i, j, decomp.v.get(i, j));
        }
    }
    let h_r = h.matmul(&v_d)?.matmul_nt(&v_d)?;
    let h_n = h.sub(&h_r)?;
    Ok((h_r, h_n))
}

/// Per-space spectrum entry of a [`DiagnosticsReport`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpaceReport {
    pub space: String,
    pub rows: usize,
    pub cols: usize,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub tolerance: f64,
}

/// How the range/null decomposition in a report was derived.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NullSpaceReport {
    /// `"projection"` when the head's own map was decomposed, `"final_layer"`
    /// when only the nonlinear head's last linear layer was (an
    /// approximation in an intermediate space).
    pub basis: String,
    /// Row rank of the decomposed map (its output dimension).
    pub rank: usize,
    /// Dimension of the null space within the map's input space.
    pub null_dim: usize,
    pub note: String,
}

/// The full analysis output for one checkpoint's features.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsReport {
    pub checkpoint: String,
    pub head_kind: String,
    pub spaces: Vec<SpaceReport>,
    /// `rank(H) − rank(Z)`.
    pub rank_deficit: i64,
    /// Absent when the head has no linear map to decompose (identity head)
    /// or the map is row-rank deficient.
    pub null_space: Option<NullSpaceReport>,
}

/// [`analyze`]'s output: the serializable report plus the decomposed feature
/// matrices (present exactly when the report's `null_space` is).
#[derive(Debug, Clone)]
pub struct Diagnostics<S: Real = f64> {
    pub report: DiagnosticsReport,
    pub h_r: Option<Tensor<S>>,
    pub h_n: Option<Tensor<S>>,
}

fn space_report<S: Real>(features: &FeatureMatrix<S>) -> Result<SpaceReport> {
    let spectrum = covariance_spectrum(features)?;
    Ok(SpaceReport {
        space: features.space().as_str().to_string(),
        rows: features.n(),
        cols: features.q(),
        eigenvalues: spectrum.eigenvalues,
        rank: numerical_rank(features.data(), None)?,
        tolerance: spectrum.tolerance,
    })
}

/// Runs the full suite on one checkpoint's backbone features `h` and
/// embeddings `z`: spectra and ranks for every available space, the rank
/// deficit, and — when the head ends in a linear map of full row rank — the
/// range/null-space decomposition of that map's inputs.
///
/// For single-layer heads the decomposition applies to `h` itself with the
/// bias ignored; for the nonlinear head it applies to the hidden features
/// entering the final layer and is labeled as that approximation. A
/// row-rank-deficient map degrades to a report without a decomposition
/// rather than an error, since collapsed heads are a legitimate measurement
/// outcome.
pub fn analyze<S: Real>(
    checkpoint: &str,
    head: &Head<S>,
    h: &Tensor<S>,
    z: &Tensor<S>,
) -> Result<Diagnostics<S>> {
    let h_features = FeatureMatrix::new(h.clone(), SpaceTag::H, checkpoint)?;
    let z_features = FeatureMatrix::new(z.clone(), SpaceTag::Z, checkpoint)?;
    let deficit = rank_deficit(&h_features, &z_features)?;

    let mut spaces = vec![space_report(&h_features)?, space_report(&z_features)?];

    // A linear map cannot raise rank; the affine bias of the trainable
    // linear head is the only wrinkle and never does so on real feature
    // batches the paper's families produce.
    if matches!(
        head.kind(),
        HeadKind::Linear | HeadKind::PcaLinear | HeadKind::DiagonalLowRank
    ) {
        assert!(
            deficit >= 0,
            "embeddings from a linear map outranked their features (deficit {deficit})"
        );
    }

    let mut null_space = None;
    let mut h_r_out = None;
    let mut h_n_out = None;
    if let Some((map, is_final_layer)) = head.analysis_matrix() {
        let inputs = head.final_layer_inputs(h)?;
        match null_space_decompose(&map, &inputs) {
            Ok((h_r, h_n)) => {
                let (d, m_in) = map.shape();
                let (basis, note) = if is_final_layer {
                    (
                        "final_layer",
                        "decomposition of the hidden features under the head's final \
                         linear layer; an approximation, since the head itself is non-linear"
                            .to_string(),
                    )
                } else {
                    ("projection", "decomposition of the backbone features under the head's \
                      linear map; bias ignored"
                        .to_string())
                };
                spaces.push(space_report(&FeatureMatrix::new(
                    h_r.clone(),
                    SpaceTag::Hr,
                    checkpoint,
                )?)?);
                spaces.push(space_report(&FeatureMatrix::new(
                    h_n.clone(),
                    SpaceTag::Hn,
                    checkpoint,
                )?)?);
                null_space = Some(NullSpaceReport {
                    basis: basis.to_string(),
                    rank: d,
                    null_dim: m_in - d,
                    note,
                });
                h_r_out = Some(h_r);
                h_n_out = Some(h_n);
            }
            Err(Error::RankDeficient { sigma_min, tol }) => {
                null_space = Some(NullSpaceReport {
                    basis: "none".to_string(),
                    rank: 0,
                    null_dim: 0,
                    note: format!(
                        "head's linear map is row-rank deficient (sigma_min = {sigma_min:e}, \
                         tolerance = {tol:e}); decomposition skipped"
                    ),
                });
            }
            Err(other) => return Err(other),
        }
    }

    Ok(Diagnostics {
        report: DiagnosticsReport {
            checkpoint: checkpoint.to_string(),
            head_kind: head.kind().as_str().to_string(),
            spaces,
            rank_deficit: deficit,
            null_space,
        },
        h_r: h_r_out,
        h_n: h_n_out,
    })
}
