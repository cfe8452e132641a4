//! Host-domain value storage and the device-to-host gather channel.
//!
//! Value rows never live in the device domain: the engine's device-side
//! state holds only codebooks, index matrices and the recent-key buffer.
//! The sole coupling between the domains is the [`GatherRequest`] /
//! [`GatherReply`] message pair defined here.

use crate::error::{Error, Result};
use crate::eviction::EvictionSelection;
use crate::mat::Matrix;

/// Accounting convention: weights cross the boundary as 2-byte scores,
/// indices as 4-byte offsets.
pub const WEIGHT_PAYLOAD_BYTES: u64 = 2;
pub const INDEX_PAYLOAD_BYTES: u64 = 4;

/// Cumulative byte counts for everything sent over the channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferLedger {
    /// Weight payload bytes, `2 * k*` per message.
    pub bytes_weights: u64,
    /// Index payload bytes, `4 * k*` per message.
    pub bytes_indices: u64,
    /// Messages sent.
    pub messages: u64,
    /// Total selected tokens across all messages.
    pub selected_tokens: u64,
}

impl TransferLedger {
    fn record(&mut self, k_star: usize) {
        self.bytes_weights += k_star as u64 * WEIGHT_PAYLOAD_BYTES;
        self.bytes_indices += k_star as u64 * INDEX_PAYLOAD_BYTES;
        self.messages += 1;
        self.selected_tokens += k_star as u64;
    }
}

/// Message sent device-to-host for one query head: which value rows to
/// read and with what weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherRequest {
    pub layer: u16,
    pub head: u16,
    pub k_star: u32,
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
}

impl GatherRequest {
    pub fn from_selection(layer: usize, head: usize, sel: &EvictionSelection) -> Self {
        Self {
            layer: layer as u16,
            head: head as u16,
            k_star: sel.k_star as u32,
            indices: sel.indices.clone(),
            weights: sel.weights.clone(),
        }
    }
}

/// Host-to-device reply: the weighted value sum for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherReply {
    pub output: Vec<f32>,
}

/// Offloaded value matrices for every (layer, kv-head) pair.
#[derive(Debug, Clone)]
pub struct ValueStore {
    layers: usize,
    heads: usize,
    d: usize,
    values: Vec<Matrix>,
    ledger: TransferLedger,
}

impl ValueStore {
    pub fn new(layers: usize, heads: usize, d: usize) -> Self {
        let values = (0..layers * heads).map(|_| Matrix::zeros(0, d)).collect();
        Self {
            layers,
            heads,
            d,
            values,
            ledger: TransferLedger::default(),
        }
    }

    fn slot(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                size: self.layers,
            });
        }
        if head >= self.heads {
            return Err(Error::IndexOutOfRange {
                what: "kv head",
                index: head,
                size: self.heads,
            });
        }
        Ok(layer * self.heads + head)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.values[self.slot(layer, head)?].rows())
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    /// Bulk-load value rows for one (layer, head) pair.
    pub fn offload(&mut self, layer: usize, head: usize, v: &Matrix) -> Result<()> {
        let slot = self.slot(layer, head)?;
        if v.cols() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "value rows have width {}, store expects {}",
                v.cols(),
                self.d
            )));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("offloaded values"));
        }
        for r in 0..v.rows() {
            self.values[slot].push_row(v.row(r))?;
        }
        Ok(())
    }

    /// Append a single decode-time value row.
    pub fn append_value(&mut self, layer: usize, head: usize, v: &[f32]) -> Result<()> {
        let slot = self.slot(layer, head)?;
        if v.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "value row length {} does not match width {}",
                v.len(),
                self.d
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("appended value row"));
        }
        self.values[slot].push_row(v)
    }

    /// Serve one gather message: the weighted value sum over the selected
    /// rows, summed in the request's stored order with an f64 accumulator.
    /// Records payload bytes in the ledger.
    pub fn serve(&mut self, req: &GatherRequest) -> Result<GatherReply> {
        let slot = self.slot(req.layer as usize, req.head as usize)?;
        if req.indices.is_empty() {
            return Err(Error::EmptyInput("gather request selection"));
        }
        if req.indices.len() != req.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "gather request carries {} indices but {} weights",
                req.indices.len(),
                req.weights.len()
            )));
        }
        let values = &self.values[slot];
        let mut acc = vec![0.0f64; self.d];
        for (&idx, &w) in req.indices.iter().zip(&req.weights) {
            if idx as usize >= values.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "value row",
                    index: idx as usize,
                    size: values.rows(),
                });
            }
            let row = values.row(idx as usize);
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += w as f64 * v as f64;
            }
        }
        self.ledger.record(req.indices.len());
        Ok(GatherReply {
            output: acc.into_iter().map(|x| x as f32).collect(),
        })
    }

    /// Convenience wrapper building the message from a selection.
    pub fn gather_weighted_sum(
        &mut self,
        layer: usize,
        head: usize,
        sel: &EvictionSelection,
    ) -> Result<Vec<f32>> {
        let req = GatherRequest::from_selection(layer, head, sel);
        Ok(self.serve(&req)?.output)
    }
}
