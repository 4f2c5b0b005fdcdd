//! The three ways edge maps enter flow estimation: augmentation,
//! concatenation, and averaging the outputs of a frame stream and an edge
//! stream.

use ea_tensor::Tensor;

use crate::error::{Error, Result};
use crate::flow::FlowMap;
use crate::imaging::{check_same_dims, EdgeMap, Frame};

/// A channel-planar image with an arbitrary number of channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl MultiChannelImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone()).expect("layout")
    }
}

/// `I ⊙ E` with `E` broadcast over the colour channels.
fn masked(frame: &Frame, edges: &EdgeMap) -> Vec<f32> {
    let plane = frame.height() * frame.width();
    frame
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * edges.data()[i % plane])
        .collect()
}

/// `½(I + I ⊙ E)`: non-edge pixels are halved, edge pixels kept.
pub fn edge_augment(frame: &Frame, edges: &EdgeMap) -> Result<MultiChannelImage> {
    check_same_dims("edge_augment", frame.dims(), edges.dims())?;
    let data = frame
        .data()
        .iter()
        .zip(masked(frame, edges))
        .map(|(&i, m)| 0.5 * (i + m))
        .collect();
    Ok(MultiChannelImage {
        height: frame.height(),
        width: frame.width(),
        channels: 3,
        data,
    })
}

/// `[I ; I ⊙ E]`, six channels.
pub fn edge_concat(frame: &Frame, edges: &EdgeMap) -> Result<MultiChannelImage> {
    check_same_dims("edge_concat", frame.dims(), edges.dims())?;
    let mut data = frame.data().to_vec();
    data.extend(masked(frame, edges));
    Ok(MultiChannelImage {
        height: frame.height(),
        width: frame.width(),
        channels: 6,
        data,
    })
}

/// `½(F_frames + F_edges)`.
pub fn two_stream_merge(flow_from_frames: &FlowMap, flow_from_edges: &FlowMap) -> Result<FlowMap> {
    check_same_dims("two_stream_merge", flow_from_frames.dims(), flow_from_edges.dims())?;
    let data = flow_from_frames
        .data()
        .iter()
        .zip(flow_from_edges.data())
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    FlowMap::new(flow_from_frames.height(), flow_from_frames.width(), data)
}

/// Tensor form of [`two_stream_merge`] for batched network outputs.
pub fn merge_tensors(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "two_stream_merge",
            lhs: format!("{:?}", a.shape()),
            rhs: format!("{:?}", b.shape()),
        });
    }
    Ok(a.zip_map(b, |p, q| 0.5 * (p + q)))
}

/// Batched [`edge_augment`]: `frames` is `N × 3 × H × W`, `edges` `N × 1 × H × W`.
pub fn augment_tensor(frames: &Tensor<f32>, edges: &Tensor<f32>) -> Result<Tensor<f32>> {
    let masked = masked_tensor(frames, edges)?;
    Ok(frames.zip_map(&masked, |i, m| 0.5 * (i + m)))
}

/// Batched [`edge_concat`], giving `N × 6 × H × W`.
pub fn concat_tensor(frames: &Tensor<f32>, edges: &Tensor<f32>) -> Result<Tensor<f32>> {
    let masked = masked_tensor(frames, edges)?;
    Ok(Tensor::concat_channels(&[frames, &masked])?)
}

fn masked_tensor(frames: &Tensor<f32>, edges: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, _, h, w] = frames.shape();
    if edges.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "edge fusion",
            lhs: format!("{:?}", frames.shape()),
            rhs: format!("{:?}", edges.shape()),
        });
    }
    let plane = h * w;
    let mut out = frames.clone();
    for s in 0..n {
        let e = edges.sample(s).to_vec();
        for (i, v) in out.sample_mut(s).iter_mut().enumerate() {
            *v *= e[i % plane];
        }
    }
    Ok(out)
}
