//! Encoder backed by precomputed `VXF1` feature files.
//!
//! Files hold whole-volume features, one per subject. A slice is looked up by
//! its absolute depth index, and a sub-volume's in-plane window selects the
//! proportional block of the token grid.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use super::{SliceContext, SliceEncoder, SliceFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::io::{read_feature_file, FeatureFile};
use crate::tensor::Element;

pub struct ImportedEncoder {
    dir: PathBuf,
    d_emb: usize,
    cache: Mutex<HashMap<String, Arc<FeatureFile>>>,
}

/// Grid rows covering pixel rows `[start, start + len)` of `full`.
fn grid_span(start: usize, len: usize, full: usize, grid: usize) -> (usize, usize) {
    let lo = start * grid / full;
    let hi = ((start + len) * grid).div_ceil(full).max(lo + 1);
    (lo, hi.min(grid))
}

impl ImportedEncoder {
    pub fn new(dir: PathBuf, d_emb: usize) -> Self {
        ImportedEncoder {
            dir,
            d_emb,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, subject: &str) -> Result<Arc<FeatureFile>> {
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        if let Some(f) = cache.get(subject) {
            return Ok(f.clone());
        }
        let path = self.dir.join(format!("{subject}.vxf"));
        if !path.exists() {
            return Err(Error::MissingSubject(subject.to_string()));
        }
        let f = read_feature_file(&path)?;
        if f.subject_id != subject {
            return Err(Error::Format {
                path,
                msg: format!("holds subject '{}', expected '{subject}'", f.subject_id),
            });
        }
        if f.d_emb() != self.d_emb {
            return Err(Error::Config(format!(
                "feature file for '{subject}' has d_emb {}, config expects {}",
                f.d_emb(),
                self.d_emb
            )));
        }
        let f = Arc::new(f);
        cache.insert(subject.to_string(), f.clone());
        Ok(f)
    }
}

impl<T: Element> SliceEncoder<T> for ImportedEncoder {
    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn tag(&self) -> String {
        format!("imported {}", self.dir.display())
    }

    fn encode_slice(&self, _: &[T], _: [usize; 2], ctx: &SliceContext<'_>) -> Result<SliceFeatures<T>> {
        let f = self.load(ctx.subject)?;
        let [c, depth, gh, gw] = f.levels[0].extents;
        if ctx.depth_index >= depth {
            return Err(Error::MissingSubject(format!(
                "{} (slice {} of {depth})",
                ctx.subject, ctx.depth_index
            )));
        }
        let [y0, x0, h, w] = ctx.window;
        let (r0, r1) = grid_span(y0, h, ctx.full_in_plane[0], gh);
        let (c0, c1) = grid_span(x0, w, ctx.full_in_plane[1], gw);
        let (oh, ow) = (r1 - r0, c1 - c0);
        let levels: [Vec<T>; LEVELS] = std::array::from_fn(|k| {
            let src = &f.levels[k].data;
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for r in r0..r1 {
                    let row = ((ch * depth + ctx.depth_index) * gh + r) * gw;
                    out.extend(src[row + c0..row + c1].iter().map(|&v| T::lit(v as f64)));
                }
            }
            out
        });
        Ok(SliceFeatures {
            levels,
            d_emb: c,
            grid: [oh, ow],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_spans() {
        assert_eq!(grid_span(0, 128, 128, 14), (0, 14));
        assert_eq!(grid_span(0, 64, 128, 14), (0, 7));
        assert_eq!(grid_span(64, 64, 128, 14), (7, 14));
        assert_eq!(grid_span(0, 1, 128, 14), (0, 1));
    }
}
