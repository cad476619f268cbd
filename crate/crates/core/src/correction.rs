//! Server-side gradient correction.
//!
//! A client gradient whose cosine with a reference gradient is negative is
//! treated as noise-corrupted and replaced by its projection onto the
//! reference's normal plane:
//!
//! ```text
//! g_i <- g_i - (g_i . g_j / ||g_j||^2) g_j
//! ```
//!
//! Two procedures are offered. `Reference` mode samples `M` reference clients
//! per round, keeps their gradients fixed and corrects every other gradient
//! against each reference in a random order (`M (N - M)` cosine tests).
//! `Pairwise` mode walks every ordered pair `(i, j)` in id order, testing the
//! running `g_i` against the original `g_j`.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, ParamVector};
use crate::rng::{self, Purpose, Stream};

pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    Reference,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub mode: CorrectionMode,
    /// `None` resolves to `max(1, N / 2)` for the clients present in a round.
    pub num_references: Option<usize>,
    pub order_seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            mode: CorrectionMode::Reference,
            num_references: None,
            order_seed: 0,
        }
    }
}

impl CorrectionConfig {
    pub fn references_for(&self, n_clients: usize) -> usize {
        self.num_references.unwrap_or((n_clients / 2).max(1))
    }
}

/// One cosine test between a (running) client gradient and a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTest {
    pub client: ClientId,
    pub reference: ClientId,
    pub cosine: f64,
    pub applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub reference_ids: Vec<ClientId>,
    pub cosines: Vec<CosineTest>,
    pub projections_applied: usize,
    pub dot_products_executed: usize,
}

impl CorrectionReport {
    pub fn min_cosine(&self) -> Option<f64> {
        self.cosines.iter().map(|c| c.cosine).reduce(f64::min)
    }

    pub fn mean_cosine(&self) -> Option<f64> {
        if self.cosines.is_empty() {
            return None;
        }
        Some(self.cosines.iter().map(|c| c.cosine).sum::<f64>() / self.cosines.len() as f64)
    }
}

/// Uniform sample of `m` ids without replacement, returned in ascending order.
pub fn select_references(
    client_ids: &[ClientId],
    m: usize,
    rng: &mut Stream,
) -> Result<Vec<ClientId>> {
    let n = client_ids.len();
    if m == 0 || m >= n {
        return Err(Error::validation(
            "num_references",
            format!("in 1..{n} for {n} clients (got {m})"),
        ));
    }
    let mut picked: Vec<ClientId> = index::sample(rng, n, m)
        .into_iter()
        .map(|i| client_ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Cosines in `[-ORTHOGONAL_SLACK, 0)` are rounding residue from an earlier
/// projection and count as orthogonal.
pub const ORTHOGONAL_SLACK: f64 = 1e-12;

/// Projects `g_i` onto the normal plane of `g_j` when their cosine is negative.
/// Returns the (possibly unchanged) vector, the cosine and whether it was applied.
pub fn project_if_conflicting(
    g_i: &ParamVector,
    g_j: &ParamVector,
) -> Result<(ParamVector, f64, bool)> {
    let cos = cosine(g_i, g_j)?;
    if cos >= -ORTHOGONAL_SLACK {
        return Ok((g_i.clone(), cos, false));
    }
    let norm_sq = dot(g_j, g_j)?;
    let mut out = g_i.clone();
    out.add_scaled(-dot(g_i, g_j)? / norm_sq, g_j)?;
    // Second pass removes the rounding residue left along g_j.
    let residue = dot(&out, g_j)? / norm_sq;
    out.add_scaled(-residue, g_j)?;
    if cosine(&out, g_j)?.abs() > ORTHOGONAL_SLACK {
        out = ParamVector::zeros(out.len());
    }
    Ok((out, cos, true))
}

fn check_dims(gradients: &BTreeMap<ClientId, ParamVector>) -> Result<()> {
    let mut it = gradients.values();
    if let Some(first) = it.next() {
        for g in it {
            if g.len() != first.len() {
                return Err(Error::DimensionMismatch {
                    left: first.len(),
                    right: g.len(),
                });
            }
        }
    }
    Ok(())
}

/// Corrects one round of client gradients.
///
/// Randomness comes from streams keyed on `(cfg.order_seed, round)`; the
/// reference draw and every client's projection order use separate streams,
/// so per-client chains are independent of each other.
pub fn correct_round(
    gradients: &BTreeMap<ClientId, ParamVector>,
    cfg: &CorrectionConfig,
    round: u64,
) -> Result<(BTreeMap<ClientId, ParamVector>, CorrectionReport)> {
    if gradients.len() < 2 {
        return Err(Error::TooFewClients(gradients.len()));
    }
    check_dims(gradients)?;
    match cfg.mode {
        CorrectionMode::Reference => reference_mode(gradients, cfg, round),
        CorrectionMode::Pairwise => pairwise_mode(gradients),
    }
}

fn reference_mode(
    gradients: &BTreeMap<ClientId, ParamVector>,
    cfg: &CorrectionConfig,
    round: u64,
) -> Result<(BTreeMap<ClientId, ParamVector>, CorrectionReport)> {
    let ids: Vec<ClientId> = gradients.keys().copied().collect();
    let m = cfg.references_for(ids.len());
    let mut ref_rng = rng::stream(cfg.order_seed, Purpose::References, &[round]);
    let refs = select_references(&ids, m, &mut ref_rng)?;

    let mut report = CorrectionReport {
        reference_ids: refs.clone(),
        ..Default::default()
    };
    let mut out = BTreeMap::new();
    for (&id, g) in gradients {
        if refs.binary_search(&id).is_ok() {
            out.insert(id, g.clone());
            continue;
        }
        let mut order = refs.clone();
        order.shuffle(&mut rng::stream(
            cfg.order_seed,
            Purpose::ProjectionOrder,
            &[round, id as u64],
        ));
        let mut running = g.clone();
        for r in order {
            let (next, cos, applied) = project_if_conflicting(&running, &gradients[&r])?;
            report.dot_products_executed += 1;
            report.projections_applied += usize::from(applied);
            report.cosines.push(CosineTest {
                client: id,
                reference: r,
                cosine: cos,
                applied,
            });
            running = next;
        }
        out.insert(id, running);
    }
    Ok((out, report))
}

fn pairwise_mode(
    gradients: &BTreeMap<ClientId, ParamVector>,
) -> Result<(BTreeMap<ClientId, ParamVector>, CorrectionReport)> {
    let mut report = CorrectionReport::default();
    let mut out = BTreeMap::new();
    for (&i, g_i) in gradients {
        let mut running = g_i.clone();
        for (&j, g_j) in gradients {
            if i == j {
                continue;
            }
            let (next, cos, applied) = project_if_conflicting(&running, g_j)?;
            report.dot_products_executed += 1;
            report.projections_applied += usize::from(applied);
            report.cosines.push(CosineTest {
                client: i,
                reference: j,
                cosine: cos,
                applied,
            });
            running = next;
        }
        out.insert(i, running);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;
    use rand::{Rng, SeedableRng};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    fn grads(vs: &[&[f64]]) -> BTreeMap<ClientId, ParamVector> {
        vs.iter().enumerate().map(|(i, v)| (i, pv(v))).collect()
    }

    #[test]
    fn projection_examples() {
        let (g, _, applied) = project_if_conflicting(&pv(&[1.0, -1.0]), &pv(&[0.0, 2.0])).unwrap();
        assert!(applied);
        assert_eq!(g, pv(&[1.0, 0.0]));

        let (g, cos, applied) =
            project_if_conflicting(&pv(&[-1.0, 0.0]), &pv(&[1.0, 0.0])).unwrap();
        assert!(applied);
        assert_eq!(cos, -1.0);
        assert_eq!(g, pv(&[0.0, 0.0]));

        let (g, _, applied) = project_if_conflicting(&pv(&[1.0, 1.0]), &pv(&[1.0, 0.0])).unwrap();
        assert!(!applied);
        assert_eq!(g, pv(&[1.0, 1.0]));

        let (g, _, applied) = project_if_conflicting(&pv(&[1.0, 1.0]), &pv(&[0.0, 0.0])).unwrap();
        assert!(!applied);
        assert_eq!(g, pv(&[1.0, 1.0]));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = Stream::seed_from_u64(2);
        for _ in 0..200 {
            let a = pv(&(0..12)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>());
            let b = pv(&(0..12)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>());
            let (once, _, _) = project_if_conflicting(&a, &b).unwrap();
            let (twice, _, applied) = project_if_conflicting(&once, &b).unwrap();
            assert!(!applied);
            assert_eq!(once.to_bits(), twice.to_bits());
            assert!(l2_norm(&once) <= l2_norm(&a) + 1e-12);
        }
    }

    #[test]
    fn select_references_examples() {
        let mut rng = Stream::seed_from_u64(0);
        let r = select_references(&[4, 9], 1, &mut rng).unwrap();
        assert!(r == vec![4] || r == vec![9]);
        let r = select_references(&[0, 1, 2, 3], 3, &mut rng).unwrap();
        assert_eq!(r.len(), 3);
        assert!(select_references(&[0, 1], 2, &mut rng).is_err());
        assert!(select_references(&[0, 1], 0, &mut rng).is_err());
    }

    #[test]
    fn reference_selection_frequency() {
        let ids: Vec<_> = (0..6).collect();
        let (m, draws) = (2, 10_000);
        let mut hits = [0usize; 6];
        for d in 0..draws {
            let mut rng = rng::stream(1, Purpose::References, &[d]);
            for r in select_references(&ids, m, &mut rng).unwrap() {
                hits[r] += 1;
            }
        }
        let p = m as f64 / ids.len() as f64;
        let stderr = (p * (1.0 - p) / draws as f64).sqrt();
        for h in hits {
            assert!((h as f64 / draws as f64 - p).abs() <= 4.0 * stderr);
        }
    }

    #[test]
    fn two_client_round_projects_non_reference() {
        let g = grads(&[&[1.0, -1.0], &[0.0, 2.0]]);
        let cfg = CorrectionConfig::default();
        let (out, report) = correct_round(&g, &cfg, 0).unwrap();
        assert_eq!(report.reference_ids.len(), 1);
        let r = report.reference_ids[0];
        let other = 1 - r;
        assert_eq!(out[&r].to_bits(), g[&r].to_bits());
        assert!(dot(&out[&other], &g[&r]).unwrap().abs() < 1e-12);
        assert_eq!(report.projections_applied, 1);
        assert_eq!(report.dot_products_executed, 1);
    }

    #[test]
    fn no_conflict_is_identity() {
        let g = grads(&[&[1.0, 0.5], &[0.5, 1.0], &[1.0, 1.0]]);
        for mode in [CorrectionMode::Reference, CorrectionMode::Pairwise] {
            let cfg = CorrectionConfig {
                mode,
                ..Default::default()
            };
            let (out, report) = correct_round(&g, &cfg, 3).unwrap();
            assert_eq!(out, g);
            assert_eq!(report.projections_applied, 0);
        }
    }

    #[test]
    fn cosine_test_counts() {
        let g = grads(&[&[1.0, 0.0], &[-1.0, 0.2], &[0.3, -1.0]]);
        let cfg = CorrectionConfig {
            num_references: Some(1),
            ..Default::default()
        };
        let (_, report) = correct_round(&g, &cfg, 0).unwrap();
        assert_eq!(report.dot_products_executed, 2);
        let pair = CorrectionConfig {
            mode: CorrectionMode::Pairwise,
            ..Default::default()
        };
        let (_, report) = correct_round(&g, &pair, 0).unwrap();
        assert_eq!(report.dot_products_executed, 6);
    }

    #[test]
    fn pairwise_tests_running_vector_against_originals() {
        // Client 0 conflicts with both others; after projecting against 1 it
        // is re-tested against the original g_2.
        let g = grads(&[&[-1.0, -1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = CorrectionConfig {
            mode: CorrectionMode::Pairwise,
            ..Default::default()
        };
        let (out, report) = correct_round(&g, &cfg, 0).unwrap();
        assert_eq!(out[&0], pv(&[0.0, 0.0]));
        // (1,0) -> (0.5,-0.5) against g_0, then conflicts with g_2 -> (0.5,0).
        assert_eq!(out[&1], pv(&[0.5, 0.0]));
        assert_eq!(out[&2], pv(&[0.0, 0.5]));
        assert_eq!(report.projections_applied, 6);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            correct_round(&grads(&[&[1.0]]), &CorrectionConfig::default(), 0),
            Err(Error::TooFewClients(1))
        ));
        assert!(correct_round(
            &grads(&[&[1.0], &[1.0, 2.0]]),
            &CorrectionConfig::default(),
            0
        )
        .is_err());
    }
}
