//! Parameter-free stand-ins for trained networks, used to pin down
//! evaluation and data-alignment behavior with known outputs.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Logit margin the oracle stub puts on the true class.
pub const ORACLE_MARGIN: f32 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubKind {
    /// Large logit on the true label, zero elsewhere.
    Oracle,
    /// The same value for every class of every image.
    Constant,
    /// Row `i` carries the dataset index in column 0.
    IndexSentinel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubModel {
    pub stub: StubKind,
    pub num_classes: usize,
    #[serde(default)]
    pub value: f32,
}

impl StubModel {
    pub fn new(stub: StubKind, num_classes: usize) -> Self {
        Self {
            stub,
            num_classes,
            value: 0.0,
        }
    }

    /// Logits for a batch identified by its labels and dataset indices.
    pub fn logits(&self, labels: &[usize], indices: &[usize]) -> Tensor<f32> {
        let c = self.num_classes;
        let mut out = vec![0.0f32; labels.len() * c];
        for (i, row) in out.chunks_mut(c).enumerate() {
            match self.stub {
                StubKind::Oracle => row[labels[i]] = ORACLE_MARGIN,
                StubKind::Constant => row.fill(self.value),
                StubKind::IndexSentinel => row[0] = indices[i] as f32,
            }
        }
        Tensor::from_parts(vec![labels.len(), c], out)
    }
}
