//! Rasterization of scenes into the HR image and its ground-truth maps.

use super::scene::{Scene, PALETTE};
use super::{ModalityKind, ModalityMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub hr: Tensor<f32>,
    pub depth: ModalityMap,
    pub seg: ModalityMap,
    pub edge: ModalityMap,
}

/// Painter's rendering at pixel centers: the nearest (lowest-rank) shape
/// containing a pixel owns it. Segmentation id = rank + 1 (0 background);
/// depth = 1 − rank/n inside a shape, 0 on background; edges mark
/// 4-neighbor segmentation id changes.
pub fn render(scene: &Scene, res: usize) -> Result<RenderOutput> {
    if res < 8 {
        return Err(Error::domain(format!("render resolution {res} < 8")));
    }
    scene.validate()?;
    let n = scene.shapes.len();
    // Nearest-first order: the first containing shape wins.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| scene.shapes[i].rank);

    let mut hr = vec![0.0f32; res * res * 3];
    let mut depth = vec![0.0f32; res * res];
    let mut seg = vec![0.0f32; res * res];
    for i in 0..res {
        let y = (i as f32 + 0.5) / res as f32;
        let bg = [
            scene.bg_top[0] + (scene.bg_bottom[0] - scene.bg_top[0]) * y,
            scene.bg_top[1] + (scene.bg_bottom[1] - scene.bg_top[1]) * y,
            scene.bg_top[2] + (scene.bg_bottom[2] - scene.bg_top[2]) * y,
        ];
        for j in 0..res {
            let x = (j as f32 + 0.5) / res as f32;
            let p = i * res + j;
            let hit = order.iter().find(|&&s| scene.shapes[s].contains(x, y));
            match hit {
                Some(&s) => {
                    let shape = &scene.shapes[s];
                    hr[p * 3..p * 3 + 3].copy_from_slice(&PALETTE[shape.color]);
                    seg[p] = (shape.rank + 1) as f32;
                    depth[p] = 1.0 - shape.rank as f32 / n as f32;
                }
                None => {
                    hr[p * 3..p * 3 + 3].copy_from_slice(&bg);
                }
            }
        }
    }

    let mut edge = vec![0.0f32; res * res];
    for i in 0..res {
        for j in 0..res {
            let p = i * res + j;
            let id = seg[p];
            let boundary = (i > 0 && seg[p - res] != id)
                || (i + 1 < res && seg[p + res] != id)
                || (j > 0 && seg[p - 1] != id)
                || (j + 1 < res && seg[p + 1] != id);
            if boundary {
                edge[p] = 1.0;
            }
        }
    }

    Ok(RenderOutput {
        hr: Tensor::from_vec(vec![res, res, 3], hr)?,
        depth: ModalityMap::new(ModalityKind::Depth, Tensor::from_vec(vec![res, res, 1], depth)?)?,
        seg: ModalityMap::new(ModalityKind::Seg, Tensor::from_vec(vec![res, res, 1], seg)?)?,
        edge: ModalityMap::new(ModalityKind::Edge, Tensor::from_vec(vec![res, res, 1], edge)?)?,
    })
}
