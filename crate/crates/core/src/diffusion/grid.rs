use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::schedules::Layout;

/// Dimensions of a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    /// Alphabet size `K`; the mask id is `K`.
    pub num_classes: usize,
    /// Number of codebooks `N_q`.
    pub num_layers: usize,
    /// Frames per codebook `L`.
    pub frames: usize,
    pub layout: Layout,
}

impl GridShape {
    pub fn new(num_classes: usize, num_layers: usize, frames: usize, layout: Layout) -> Result<Self> {
        ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
        ensure_arg!(num_layers >= 1 && frames >= 1, "grid needs N_q >= 1 and L >= 1");
        Ok(Self {
            num_classes,
            num_layers,
            frames,
            layout,
        })
    }

    /// Flattened length `N_q * L`.
    pub fn len(&self) -> usize {
        self.num_layers * self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask_id(&self) -> u32 {
        self.num_classes as u32
    }
}

/// An `N_q x L` grid of tokens stored flattened in its layout order.
///
/// Tokens are in `0..=K`; `K` is the mask and only appears in corrupted grids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    shape: GridShape,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, tokens: Vec<u32>) -> Result<Self> {
        ensure_arg!(
            tokens.len() == shape.len(),
            "expected {} tokens for a {}x{} grid, got {}",
            shape.len(),
            shape.num_layers,
            shape.frames,
            tokens.len()
        );
        if let Some(bad) = tokens.iter().find(|&&t| t > shape.mask_id()) {
            return Err(Error::Argument(format!("token {bad} exceeds mask id {}", shape.mask_id())));
        }
        Ok(Self { shape, tokens })
    }

    /// Build from per-layer rows (`layers[q][l]`).
    pub fn from_layers(num_classes: usize, layout: Layout, layers: &[Vec<u32>]) -> Result<Self> {
        ensure_arg!(!layers.is_empty(), "grid needs at least one layer");
        let frames = layers[0].len();
        ensure_arg!(layers.iter().all(|r| r.len() == frames), "ragged layer rows");
        let shape = GridShape::new(num_classes, layers.len(), frames, layout)?;
        let mut tokens = vec![0; shape.len()];
        for (q, row) in layers.iter().enumerate() {
            for (l, &tok) in row.iter().enumerate() {
                tokens[layout.position(q, l, shape.num_layers, frames)] = tok;
            }
        }
        Self::new(shape, tokens)
    }

    pub fn filled(shape: GridShape, token: u32) -> Self {
        Self {
            shape,
            tokens: vec![token; shape.len()],
        }
    }

    /// Per-layer rows (`[q][l]`).
    pub fn to_layers(&self) -> Vec<Vec<u32>> {
        let s = self.shape;
        (0..s.num_layers)
            .map(|q| (0..s.frames).map(|l| self.get(q, l)).collect())
            .collect()
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [u32] {
        &mut self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, layer: usize, frame: usize) -> u32 {
        let s = self.shape;
        self.tokens[s.layout.position(layer, frame, s.num_layers, s.frames)]
    }

    pub fn mask_id(&self) -> u32 {
        self.shape.mask_id()
    }

    pub fn is_clean(&self) -> bool {
        self.tokens.iter().all(|&t| t < self.mask_id())
    }

    pub fn count_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id()).count()
    }

    pub(crate) fn ensure_clean(&self) -> Result<()> {
        ensure_arg!(self.is_clean(), "clean grid x0 must not contain the mask id");
        Ok(())
    }
}

/// Conditioning label, or the null condition used for unconditional prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(from = "Option<u32>", into = "Option<u32>")]
pub enum Condition {
    #[default]
    Null,
    Label(u32),
}

impl From<Option<u32>> for Condition {
    fn from(v: Option<u32>) -> Self {
        v.map_or(Condition::Null, Condition::Label)
    }
}

impl From<Condition> for Option<u32> {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Null => None,
            Condition::Label(l) => Some(l),
        }
    }
}
