use serde::{Deserialize, Serialize};

use super::Variant;
use crate::attention::{matched_coord, replace_features, GraftAction, GraftPacket};
use crate::error::Result;
use crate::flow::{FlowTrajectory, GraftHook, HookPoint};
use crate::grid::{BinaryMask, FeatureGrid};
use crate::matching::{apply_dropout, dropout_mask, semantic_match, DropoutSchedule, Matching};

/// Mask sizes at one (step, block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCounts {
    pub step: usize,
    pub t: f32,
    pub block: usize,
    pub pre: usize,
    pub sim: usize,
    pub consi: usize,
    #[serde(rename = "final")]
    pub final_mask: usize,
    pub retained: usize,
}

/// Matching state captured at one (step, block) for visualization.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub at: HookPoint,
    pub matching: Matching,
    pub retained: BinaryMask,
}

/// The per-(step, block) grafting hook: look up the inversion entry at the
/// same time key, match, filter, drop out and build the action for the
/// configured variant.
pub struct GraftingHook<'a> {
    trajectory: &'a FlowTrajectory,
    pre_mask: &'a BinaryMask,
    variant: Variant,
    tau: f32,
    delta: f32,
    schedules: Vec<DropoutSchedule>,
    hooked: Vec<bool>,
    pub counts: Vec<StepCounts>,
    capture_at: Option<(usize, usize)>,
    pub snapshot: Option<Snapshot>,
    dump_attention: bool,
    pub attention: Vec<(HookPoint, FeatureGrid)>,
}

impl<'a> GraftingHook<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        trajectory: &'a FlowTrajectory,
        pre_mask: &'a BinaryMask,
        variant: Variant,
        tau: f32,
        delta: f32,
        dropout: DropoutSchedule,
        n_blocks: usize,
        hooked_blocks: &[usize],
    ) -> Self {
        let mut hooked = vec![false; n_blocks];
        for &b in hooked_blocks {
            if b < n_blocks {
                hooked[b] = true;
            }
        }
        Self {
            trajectory,
            pre_mask,
            variant,
            tau,
            delta,
            schedules: (0..n_blocks).map(|b| dropout.fork(b as u64)).collect(),
            hooked,
            counts: Vec::new(),
            capture_at: None,
            snapshot: None,
            dump_attention: false,
            attention: Vec::new(),
        }
    }

    /// Keep the matching seen at generation step `step`, block `block`.
    pub fn capture(mut self, step: usize, block: usize) -> Self {
        self.capture_at = Some((step, block));
        self
    }

    /// Keep the softmax weights of every hooked call.
    pub fn with_attention_dump(mut self, on: bool) -> Self {
        self.dump_attention = on;
        self
    }

    fn count(&mut self, at: HookPoint, pre: usize, sim: usize, consi: usize, fin: usize, retained: usize) {
        self.counts.push(StepCounts {
            step: at.step,
            t: at.t,
            block: at.block,
            pre,
            sim,
            consi,
            final_mask: fin,
            retained,
        });
    }
}

impl GraftHook for GraftingHook<'_> {
    fn graft(&mut self, at: HookPoint, generated: &FeatureGrid) -> Result<GraftAction> {
        if !self.hooked.get(at.block).copied().unwrap_or(false) {
            return Ok(GraftAction::None);
        }
        let entry = self.trajectory.entry_at(at.t)?;
        let pre = self.pre_mask.popcount();
        if self.variant == Variant::NoGraft || pre == 0 {
            self.count(at, pre, 0, 0, 0, 0);
            return Ok(GraftAction::None);
        }
        let rec = &entry.blocks[at.block];
        let gen_shape = generated.shape();
        let drop = dropout_mask(self.pre_mask.shape(), &self.schedules[at.block], at.t)?;

        if self.variant == Variant::NoMatch {
            let retained = apply_dropout(self.pre_mask, &drop)?;
            self.count(at, pre, pre, pre, pre, retained.popcount());
            let ref_shape = rec.input.shape();
            let packet = GraftPacket::gather(&rec.keys, &rec.values, &retained, |i| ref_shape.coord(i))?
                .with_origin(at.block, at.t);
            return Ok(GraftAction::Append(packet));
        }

        let outcome = semantic_match(&rec.input, generated, self.pre_mask, self.tau, self.delta)?;
        let retained = apply_dropout(&outcome.final_mask, &drop)?;
        self.count(
            at,
            pre,
            outcome.sim_mask.popcount(),
            outcome.consi_mask.popcount(),
            outcome.final_mask.popcount(),
            retained.popcount(),
        );
        let action = if self.variant == Variant::Replace {
            GraftAction::Replace(replace_features(generated, &rec.input, &outcome.matching, &retained)?)
        } else {
            let matching = &outcome.matching;
            let packet = GraftPacket::gather(&rec.keys, &rec.values, &retained, |i| {
                matched_coord(matching, gen_shape, i)
            })?
            .with_origin(at.block, at.t);
            GraftAction::Append(packet)
        };
        if self.capture_at == Some((at.step, at.block)) {
            self.snapshot = Some(Snapshot {
                at,
                matching: outcome.matching,
                retained,
            });
        }
        Ok(action)
    }

    fn wants_attention(&self, at: HookPoint) -> bool {
        self.dump_attention && self.hooked.get(at.block).copied().unwrap_or(false)
    }

    fn attention(&mut self, at: HookPoint, probs: FeatureGrid) {
        self.attention.push((at, probs));
    }
}
