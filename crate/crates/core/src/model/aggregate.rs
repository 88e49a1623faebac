//! Aggregation of one object's per-query-kind outputs into a single
//! prediction.
//!
//! Collaborative gating scores each kind with a shared 2-layer network over
//! the concatenated (zero-padded) decoder embeddings; weights of missing
//! kinds are removed and the rest renormalized to sum to one. A group with
//! a single output (det queries in particular) passes through unchanged.

use crate::grad::{BoundParams, Tape, Tensor, Var};

use super::net::{linear, MqtModel, QueryOutput, QueryOutputVar};
use super::{BoundingBox, ModelError, QueryKind};

/// Aggregation scheme for multi-query outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMethod {
    CollabGating,
    Avg,
    Max,
    /// No mixing: box from the `pos` output, appearance from `id`,
    /// embedding from `both` (with presence-order fallbacks).
    Heuristic,
}

#[derive(Debug, Clone)]
pub struct AggregatedVar {
    pub v: Var,
    pub b: Var,
    pub a: Var,
    /// Final per-kind weights; nonnegative, summing to 1 over present kinds.
    /// For avg/max/heuristic these are the nominal uniform weights.
    pub gate_weights: Vec<(QueryKind, f64)>,
}

impl AggregatedVar {
    pub fn detach(&self) -> AggregatedOutput {
        let b = self.b.value();
        AggregatedOutput {
            v: self.v.value(),
            b: BoundingBox::from_array([b.data()[0], b.data()[1], b.data()[2], b.data()[3]]),
            a: self.a.value(),
            gate_weights: self.gate_weights.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AggregatedOutput {
    pub v: Tensor,
    pub b: BoundingBox,
    pub a: Tensor,
    pub gate_weights: Vec<(QueryKind, f64)>,
}

fn validate_group(group: &[&QueryOutputVar]) -> Result<(), ModelError> {
    if group.is_empty() {
        return Err(ModelError::EmptyAggregation);
    }
    let has_det = group.iter().any(|o| o.kind == QueryKind::Det);
    if has_det && group.len() > 1 {
        return Err(ModelError::BadAggregationGroup);
    }
    if !has_det {
        let mut seen = [false; 4];
        for o in group {
            if seen[o.kind.slot()] {
                return Err(ModelError::BadAggregationGroup);
            }
            seen[o.kind.slot()] = true;
        }
    }
    Ok(())
}

impl MqtModel {
    /// Aggregate the outputs of one object's queries on an existing tape.
    pub fn aggregate_var(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        group: &[&QueryOutputVar],
    ) -> Result<AggregatedVar, ModelError> {
        validate_group(group)?;
        // Deterministic slot order: pos, id, both, det.
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by_key(|&i| group[i].kind.slot());
        let group: Vec<&QueryOutputVar> = order.into_iter().map(|i| group[i]).collect();

        if group.len() == 1 {
            // Weight renormalizes to exactly one; the triple passes through.
            let o = group[0];
            return Ok(AggregatedVar {
                v: o.v.clone(),
                b: o.b.clone(),
                a: o.a.clone(),
                gate_weights: vec![(o.kind, 1.0)],
            });
        }

        match self.config.agg {
            AggMethod::CollabGating => self.collab_gating(tape, bound, &group),
            AggMethod::Avg => {
                let k = group.len() as f64;
                let v = sum_scaled(&group, 1.0 / k, |o| &o.v);
                let b = sum_scaled(&group, 1.0 / k, |o| &o.b);
                let a = sum_scaled(&group, 1.0 / k, |o| &o.a).l2_normalize();
                let gate_weights = group.iter().map(|o| (o.kind, 1.0 / k)).collect();
                Ok(AggregatedVar { v, b, a, gate_weights })
            }
            AggMethod::Max => {
                let v = fold_max(&group, |o| &o.v);
                let b = fold_max(&group, |o| &o.b);
                let a = fold_max(&group, |o| &o.a).l2_normalize();
                let k = group.len() as f64;
                let gate_weights = group.iter().map(|o| (o.kind, 1.0 / k)).collect();
                Ok(AggregatedVar { v, b, a, gate_weights })
            }
            AggMethod::Heuristic => {
                let pick = |prefs: &[QueryKind]| -> &QueryOutputVar {
                    for p in prefs {
                        if let Some(o) = group.iter().find(|o| o.kind == *p) {
                            return o;
                        }
                    }
                    group[0]
                };
                let b_src = pick(&[QueryKind::Pos, QueryKind::Both, QueryKind::Id]);
                let a_src = pick(&[QueryKind::Id, QueryKind::Both, QueryKind::Pos]);
                let v_src = pick(&[QueryKind::Both, QueryKind::Pos, QueryKind::Id]);
                let k = group.len() as f64;
                let gate_weights = group.iter().map(|o| (o.kind, 1.0 / k)).collect();
                Ok(AggregatedVar {
                    v: v_src.v.clone(),
                    b: b_src.b.clone(),
                    a: a_src.a.clone(),
                    gate_weights,
                })
            }
        }
    }

    fn collab_gating(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        group: &[&QueryOutputVar],
    ) -> Result<AggregatedVar, ModelError> {
        let d = self.config.d_model;
        // Four fixed slots, zero-padded where the kind is missing.
        let zeros = tape.constant(Tensor::zeros(&[1, d]));
        let mut slots: Vec<Var> = vec![zeros.clone(), zeros.clone(), zeros.clone(), zeros];
        for o in group {
            slots[o.kind.slot()] = o.v.reshape(&[1, d]);
        }
        let slot_refs: Vec<&Var> = slots.iter().collect();
        let gate_in = Var::concat(&slot_refs, 1);
        let h = linear(&gate_in, bound, "gate.w1", "gate.b1").relu();
        let raw = linear(&h, bound, "gate.w2", "gate.b2").sigmoid().reshape(&[4]);

        // Drop weights of missing kinds, renormalize the rest to sum to 1.
        let picked: Vec<Var> = group.iter().map(|o| raw.slice(0, o.kind.slot(), 1)).collect();
        let picked_refs: Vec<&Var> = picked.iter().collect();
        let present = Var::concat(&picked_refs, 0);
        let weights = present.div(&present.sum());

        let mut v = None;
        let mut b = None;
        let mut a = None;
        let mut gate_weights = Vec::with_capacity(group.len());
        for (i, o) in group.iter().enumerate() {
            let w = weights.slice(0, i, 1).reshape(&[]);
            gate_weights.push((o.kind, w.item()));
            let add = |acc: Option<Var>, term: Var| match acc {
                None => Some(term),
                Some(s) => Some(s.add(&term)),
            };
            v = add(v, o.v.mul(&w));
            b = add(b, o.b.mul(&w));
            a = add(a, o.a.mul(&w));
        }
        Ok(AggregatedVar {
            v: v.unwrap(),
            b: b.unwrap(),
            a: a.unwrap().l2_normalize(),
            gate_weights,
        })
    }

    /// Value-level aggregation on a private tape.
    pub fn aggregate(&self, group: &[&QueryOutput]) -> Result<AggregatedOutput, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let vars: Vec<QueryOutputVar> = group
            .iter()
            .map(|o| QueryOutputVar {
                kind: o.kind,
                owner: o.owner,
                v: tape.constant(o.v.clone()),
                b: tape.constant(o.b.to_tensor()),
                a: tape.constant(o.a.clone()),
            })
            .collect();
        let refs: Vec<&QueryOutputVar> = vars.iter().collect();
        Ok(self.aggregate_var(&tape, &bound, &refs)?.detach())
    }
}

fn sum_scaled<'a>(
    group: &[&'a QueryOutputVar],
    factor: f64,
    field: impl Fn(&'a QueryOutputVar) -> &'a Var,
) -> Var {
    let mut acc: Option<Var> = None;
    for o in group {
        let term = field(o).scale(factor);
        acc = Some(match acc {
            None => term,
            Some(s) => s.add(&term),
        });
    }
    acc.expect("nonempty group")
}

fn fold_max<'a>(
    group: &[&'a QueryOutputVar],
    field: impl Fn(&'a QueryOutputVar) -> &'a Var,
) -> Var {
    let mut acc: Option<Var> = None;
    for o in group {
        acc = Some(match acc {
            None => field(o).clone(),
            Some(s) => s.max_elem(field(o)),
        });
    }
    acc.expect("nonempty group")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::query::QueryOwner;
    use crate::model::ModelConfig;

    fn tiny_config(agg: AggMethod) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            d_app: 4,
            n_det_queries: 3,
            n_tags: 4,
            agg,
            ..ModelConfig::default()
        }
    }

    fn unit(v: Vec<f64>) -> Tensor {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_vec(v.into_iter().map(|x| x / norm).collect())
    }

    fn output(kind: QueryKind, seed: f64) -> QueryOutput {
        QueryOutput {
            kind,
            owner: QueryOwner::Track(0),
            v: Tensor::from_vec((0..8).map(|i| seed + i as f64 * 0.1).collect()),
            b: BoundingBox::new(0.4 + seed * 0.01, 0.4, 0.2, 0.2).unwrap(),
            a: unit((0..4).map(|i| seed + i as f64).collect()),
        }
    }

    #[test]
    fn single_det_passes_through_gating() {
        let model = MqtModel::new(tiny_config(AggMethod::CollabGating), 1).unwrap();
        let o = output(QueryKind::Det, 0.3);
        let agg = model.aggregate(&[&o]).unwrap();
        assert_eq!(agg.gate_weights, vec![(QueryKind::Det, 1.0)]);
        assert_eq!(agg.v, o.v);
        assert_eq!(agg.b, o.b);
        assert_eq!(agg.a, o.a);
    }

    #[test]
    fn gate_weights_renormalize_over_every_subset() {
        let model = MqtModel::new(tiny_config(AggMethod::CollabGating), 2).unwrap();
        let pos = output(QueryKind::Pos, 0.1);
        let id = output(QueryKind::Id, 0.7);
        let both = output(QueryKind::Both, -0.4);
        let subsets: Vec<Vec<&QueryOutput>> = vec![
            vec![&pos],
            vec![&id],
            vec![&both],
            vec![&pos, &id],
            vec![&pos, &both],
            vec![&id, &both],
            vec![&pos, &id, &both],
        ];
        for subset in subsets {
            let agg = model.aggregate(&subset).unwrap();
            let sum: f64 = agg.gate_weights.iter().map(|(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-12, "weights {:?}", agg.gate_weights);
            assert!(agg.gate_weights.iter().all(|(_, w)| *w >= 0.0));
            let norm: f64 = agg.a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn renormalization_matches_forced_arithmetic() {
        // Raw gates (0.5, 0.3, 0.2) with `both` missing keep (pos, id) and
        // renormalize to (0.625, 0.375).
        let raw = [0.5, 0.3, 0.2];
        let present = [raw[0], raw[1]];
        let sum: f64 = present.iter().sum();
        let renorm: Vec<f64> = present.iter().map(|w| w / sum).collect();
        assert!((renorm[0] - 0.625).abs() < 1e-12);
        assert!((renorm[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn avg_of_identical_triples_is_identity() {
        let model = MqtModel::new(tiny_config(AggMethod::Avg), 3).unwrap();
        let pos = output(QueryKind::Pos, 0.2);
        let mut id = output(QueryKind::Id, 0.2);
        let mut both = output(QueryKind::Both, 0.2);
        id.v = pos.v.clone();
        id.b = pos.b;
        id.a = pos.a.clone();
        both.v = pos.v.clone();
        both.b = pos.b;
        both.a = pos.a.clone();
        let agg = model.aggregate(&[&pos, &id, &both]).unwrap();
        for (x, y) in agg.v.data().iter().zip(pos.v.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((agg.b.cx - pos.b.cx).abs() < 1e-12);
        for (x, y) in agg.a.data().iter().zip(pos.a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn heuristic_takes_fields_from_designated_kinds() {
        let model = MqtModel::new(tiny_config(AggMethod::Heuristic), 4).unwrap();
        let pos = output(QueryKind::Pos, 0.1);
        let id = output(QueryKind::Id, 0.9);
        let both = output(QueryKind::Both, -0.5);
        let agg = model.aggregate(&[&pos, &id, &both]).unwrap();
        assert_eq!(agg.b, pos.b);
        assert_eq!(agg.a, id.a);
        assert_eq!(agg.v, both.v);
    }

    #[test]
    fn zero_kinds_rejected() {
        let model = MqtModel::new(tiny_config(AggMethod::Avg), 5).unwrap();
        assert!(matches!(model.aggregate(&[]), Err(ModelError::EmptyAggregation)));
    }

    #[test]
    fn det_mixed_with_semantic_rejected() {
        let model = MqtModel::new(tiny_config(AggMethod::Avg), 6).unwrap();
        let det = output(QueryKind::Det, 0.0);
        let pos = output(QueryKind::Pos, 0.1);
        assert!(matches!(
            model.aggregate(&[&det, &pos]),
            Err(ModelError::BadAggregationGroup)
        ));
    }
}
