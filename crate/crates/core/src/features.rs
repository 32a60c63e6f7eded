//! Multi-level visual feature maps and text token embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Feature hierarchy level: low, middle, high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "L")]
    Low,
    #[serde(rename = "M")]
    Mid,
    #[serde(rename = "H")]
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Mid, Level::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "L",
            Level::Mid => "M",
            Level::High => "H",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Level::Low),
            "M" => Ok(Level::Mid),
            "H" => Ok(Level::High),
            other => Err(Error::config(format!("unknown level {other:?}"))),
        }
    }
}

/// Spatial height, width and channel count of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl LevelDims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LevelDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.h, self.w, self.d)
    }
}

/// One `h×w×d` grid of feature vectors, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    level: Level,
    dims: LevelDims,
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(level: Level, dims: LevelDims, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::dim(format!("empty feature map {dims} at level {level}")));
        }
        let tensor = Tensor::new(vec![dims.h, dims.w, dims.d], data)?;
        Ok(Self { level, dims, tensor })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dims(&self) -> LevelDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// The map flattened to a `(h·w)×d` matrix of position vectors.
    pub fn positions(&self) -> Tensor {
        self.tensor
            .clone()
            .reshape(vec![self.dims.positions(), self.dims.d])
            .expect("same element count")
    }

    pub fn mean_pool(&self) -> Vec<f64> {
        tensor::mean_pool(&self.tensor).expect("non-empty by construction")
    }

    /// Multiply every value by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let data = self.data().iter().map(|v| v * c).collect();
        Self::new(self.level, self.dims, data).expect("same dims")
    }
}

/// The low, middle and high level maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelFeatures {
    maps: [FeatureMap; 3],
}

impl MultiLevelFeatures {
    pub fn new(low: FeatureMap, mid: FeatureMap, high: FeatureMap) -> Result<Self> {
        let maps = [low, mid, high];
        for (map, level) in maps.iter().zip(Level::ALL) {
            if map.level() != level {
                return Err(Error::config(format!(
                    "map for level {level} is tagged {}",
                    map.level()
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn from_maps(maps: [FeatureMap; 3]) -> Result<Self> {
        let [l, m, h] = maps;
        Self::new(l, m, h)
    }

    pub fn get(&self, level: Level) -> &FeatureMap {
        &self.maps[level.index()]
    }

    pub fn maps(&self) -> &[FeatureMap; 3] {
        &self.maps
    }

    pub fn dims(&self) -> [LevelDims; 3] {
        [self.maps[0].dims(), self.maps[1].dims(), self.maps[2].dims()]
    }

    pub fn conforms_to(&self, dims: &[LevelDims; 3]) -> bool {
        self.dims() == *dims
    }
}

/// `n×d_T` matrix of text token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    tensor: Tensor,
}

impl TokenEmbeddings {
    pub fn new(tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::dim("token embeddings need at least one token"));
        }
        if dim == 0 {
            return Err(Error::dim("token embedding width must be positive"));
        }
        Ok(Self {
            tensor: Tensor::new(vec![tokens, dim], data)?,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let (n, d) = t.matrix_dims()?;
        Self::new(n, d, t.into_data())
    }

    pub fn tokens(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Reorder tokens: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.tokens() {
            return Err(Error::dim("permutation length differs from token count"));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.tensor.row(i).to_vec()).collect();
        Self::from_rows(&rows)
    }
}
