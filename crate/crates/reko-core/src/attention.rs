//! Parameter-free spatial attention and crucial-region selection.
//!
//! A bottleneck activation `[c, h, w]` is viewed as a matrix of `h*w` region
//! columns. Its attention map is the channel-mean of absolute activations per
//! region; the top-K regions by attention are the "crucial" ones that the
//! distillation losses focus on.

use crate::tensor::{Graph, TensorId};
use crate::{Error, Result};

/// Bottleneck features flattened to a `[channels, height*width]` matrix.
/// Column `r` holds the feature vector of region `r = row * width + col`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub values: TensorId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    /// Wraps an existing `[channels, height*width]` tensor.
    pub fn new(g: &Graph, values: TensorId, height: usize, width: usize) -> Result<Self> {
        let shape = g.shape(values);
        if shape.len() != 2 || shape[1] != height * width {
            return Err(Error::Shape {
                op: "feature_map",
                detail: format!("{shape:?} does not match {height}x{width} regions"),
            });
        }
        Ok(FeatureMap { values, channels: shape[0], height, width })
    }

    /// Number of spatial regions (columns).
    pub fn regions(&self) -> usize {
        self.height * self.width
    }
}

/// Which network a feature map came from. Attention-based region selection
/// is only meaningful on the teacher side; the tag keeps call sites honest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSource {
    Teacher,
    Student,
}

/// Per-region attention values, shape `[height*width]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub values: TensorId,
    pub source: AttentionSource,
}

/// Channel-mean of absolute activations per region. Needs no parameters and
/// is invariant to flipping the sign of any feature channel.
pub fn attention_map(g: &mut Graph, f: &FeatureMap, source: AttentionSource) -> Result<AttentionMap> {
    let magnitudes = g.abs(f.values)?;
    let per_region = g.mean(magnitudes, Some(0))?;
    Ok(AttentionMap { values: per_region, source })
}

/// Ordered set of region indices selected for distillation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    indices: Vec<usize>,
}

impl RegionSet {
    /// Builds a set from explicit indices; they must be distinct and within
    /// `regions`.
    pub fn from_indices(indices: Vec<usize>, regions: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArg("region set must not be empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= regions) {
            return Err(Error::IndexOutOfRange { op: "region_set", index: bad, bound: regions });
        }
        let mut seen = vec![false; regions];
        for &i in &indices {
            if seen[i] {
                return Err(Error::InvalidArg(format!("region {i} listed twice")));
            }
            seen[i] = true;
        }
        Ok(RegionSet { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, region: usize) -> bool {
        self.indices.contains(&region)
    }
}

/// Top-`k` regions by attention value, descending; ties broken by ascending
/// region index so selection is fully deterministic.
pub fn top_k_regions(g: &Graph, a: &AttentionMap, k: usize) -> Result<RegionSet> {
    top_k_indices(g.data(a.values), k).map(|indices| RegionSet { indices })
}

pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArg(format!("top-k of {k} from {n} regions")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(k);
    Ok(order)
}

/// Extracts the selected region columns as a `[channels, k]` matrix,
/// differentiable through to the feature map.
pub fn gather_regions(g: &mut Graph, f: &FeatureMap, r: &RegionSet) -> Result<TensorId> {
    if let Some(&bad) = r.indices.iter().find(|&&i| i >= f.regions()) {
        return Err(Error::IndexOutOfRange { op: "gather_regions", index: bad, bound: f.regions() });
    }
    g.gather_columns(f.values, &r.indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_map(g: &mut Graph, data: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
        let values = g.constant(data, &[c, h * w]).unwrap();
        FeatureMap::new(g, values, h, w).unwrap()
    }

    #[test]
    fn attention_averages_channel_magnitudes() {
        let mut g = Graph::new();
        // Two channels, 1x2 regions: columns (1,-3) and (-2,0).
        let f = feature_map(&mut g, vec![1.0, -2.0, -3.0, 0.0], 2, 1, 2);
        let a = attention_map(&mut g, &f, AttentionSource::Teacher).unwrap();
        assert_eq!(g.data(a.values), &[2.0, 1.0]);
    }

    #[test]
    fn attention_ignores_channel_sign() {
        let mut g = Graph::new();
        let f1 = feature_map(&mut g, vec![1.0, -2.0, -3.0, 0.5], 2, 1, 2);
        let f2 = feature_map(&mut g, vec![-1.0, 2.0, -3.0, 0.5], 2, 1, 2);
        let a1 = attention_map(&mut g, &f1, AttentionSource::Teacher).unwrap();
        let a2 = attention_map(&mut g, &f2, AttentionSource::Teacher).unwrap();
        assert_eq!(g.data(a1.values), g.data(a2.values));
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        let picked = top_k_indices(&[1.0, 5.0, 5.0, 0.0], 3).unwrap();
        assert_eq!(picked, vec![1, 2, 0]);
    }

    #[test]
    fn top_k_equal_values_prefers_early_regions() {
        let picked = top_k_indices(&[2.0, 2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn top_k_rejects_out_of_range_k() {
        assert!(top_k_indices(&[1.0, 2.0], 0).is_err());
        assert!(top_k_indices(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn region_set_rejects_duplicates_and_overflow() {
        assert!(RegionSet::from_indices(vec![0, 1, 1], 4).is_err());
        assert!(RegionSet::from_indices(vec![0, 4], 4).is_err());
        assert!(RegionSet::from_indices(vec![3, 0], 4).is_ok());
    }

    #[test]
    fn gather_pulls_selected_columns() {
        let mut g = Graph::new();
        let f = feature_map(&mut g, vec![10.0, 20.0, 30.0, 1.0, 2.0, 3.0], 2, 1, 3);
        let r = RegionSet::from_indices(vec![2, 0], 3).unwrap();
        let picked = gather_regions(&mut g, &f, &r).unwrap();
        assert_eq!(g.shape(picked), &[2, 2]);
        assert_eq!(g.data(picked), &[30.0, 10.0, 3.0, 1.0]);
    }
}
