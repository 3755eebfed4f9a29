//! Comparison and aggregation: pairwise affinity matrices between encoded
//! questions, channel stacking, and the CNN + MLP head producing class
//! logits.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::encode::{xavier_uniform, Fusion};
use crate::error::{Result, TapaError};
use crate::tensor::{
    add, add_channel_bias, conv2d, cosine_affinity, matvec, maxpool2d, pad2d, relu, reshape,
    stack, Tensor,
};

/// One or two affinity planes on a fixed square canvas. Channel 0 is the
/// embedding affinity, channel 1 (late fusion only) the topic affinity.
pub struct AffinityStack {
    pub channels: Vec<Tensor>, // canvas x canvas each
    pub valid_region: (usize, usize),
    pub canvas: usize,
}

/// Pairwise cosine affinity between encoded rows; masked rows and columns
/// are forced to exactly 0.
pub fn affinity(l: &Tensor, r: &Tensor, lmask: &[bool], rmask: &[bool]) -> Result<Tensor> {
    cosine_affinity(l, r, lmask, rmask)
}

/// Affinity over raw topic rows (no encoder in between). Only meaningful
/// in late-fusion mode.
pub fn topic_affinity(
    tl: &Tensor,
    tr: &Tensor,
    lmask: &[bool],
    rmask: &[bool],
    fusion: Fusion,
) -> Result<Tensor> {
    if fusion != Fusion::Late {
        return Err(TapaError::Contract(
            "topic_affinity is only valid in late-fusion mode".into(),
        ));
    }
    cosine_affinity(tl, tr, lmask, rmask)
}

/// Combine affinity planes as CNN input channels and place them on the
/// fixed canvas so spatial shapes are static per config.
pub fn stack_channels(
    a_emb: &Tensor,
    a_topic: Option<&Tensor>,
    canvas: usize,
) -> Result<AffinityStack> {
    let s = a_emb.shape();
    if s.len() != 2 {
        return Err(TapaError::Dimension(format!(
            "stack_channels: affinity must be 2-D, got {:?}",
            s
        )));
    }
    let valid_region = (s[0], s[1]);
    let mut channels = vec![pad2d(a_emb, canvas, canvas)?];
    if let Some(t) = a_topic {
        if t.shape() != s {
            return Err(TapaError::Dimension(format!(
                "stack_channels: {:?} vs {:?}",
                s,
                t.shape()
            )));
        }
        channels.push(pad2d(t, canvas, canvas)?);
    }
    Ok(AffinityStack {
        channels,
        valid_region,
        canvas,
    })
}

pub struct ConvLayer {
    pub filters: Tensor, // [k, c, fh, fw]
    pub bias: Tensor,    // [k]
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn new(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
        Ok(Linear {
            w: Tensor::param(vec![rows, cols], xavier_uniform(rng, cols, rows, rows * cols))?,
            b: Tensor::param(vec![rows], vec![0.0; rows])?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        add(&matvec(&self.w, x)?, &self.b)
    }
}

/// Two conv+pool layers, flatten, hidden layers of reducing width, and a
/// final linear layer to two logits. Filter counts (0, 0) bypass the CNN
/// and flatten the affinity stack directly.
pub struct Aggregator {
    pub conv1: Option<ConvLayer>,
    pub conv2: Option<ConvLayer>,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub canvas: usize,
    pub in_channels: usize,
}

fn conv_pool_out(size: usize, kernel: usize, pool: usize, pool_stride: usize) -> Result<usize> {
    if kernel > size {
        return Err(TapaError::Dimension(format!(
            "convolution kernel {} larger than input {}",
            kernel, size
        )));
    }
    let after_conv = size - kernel + 1;
    if pool > after_conv {
        return Err(TapaError::Dimension(format!(
            "pool window {} larger than conv output {}",
            pool, after_conv
        )));
    }
    Ok((after_conv - pool) / pool_stride + 1)
}

impl Aggregator {
    pub fn new(
        in_channels: usize,
        canvas: usize,
        filters: (usize, usize),
        kernels: (usize, usize),
        hidden_widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Aggregator> {
        if (filters.0 == 0) != (filters.1 == 0) {
            return Err(TapaError::Config(format!(
                "filter counts must be both zero or both nonzero, got {:?}",
                filters
            )));
        }
        for pair in hidden_widths.windows(2) {
            if pair[1] >= pair[0] {
                return Err(TapaError::Config(format!(
                    "hidden widths must be strictly decreasing, got {:?}",
                    hidden_widths
                )));
            }
        }
        let pool_size = 2;
        let pool_stride = 2;
        let (conv1, conv2, flat_width) = if filters.0 == 0 {
            (None, None, in_channels * canvas * canvas)
        } else {
            let side1 = conv_pool_out(canvas, kernels.0, pool_size, pool_stride)?;
            let side2 = conv_pool_out(side1, kernels.1, pool_size, pool_stride)?;
            let c1 = ConvLayer {
                filters: Tensor::param(
                    vec![filters.0, in_channels, kernels.0, kernels.0],
                    xavier_uniform(
                        rng,
                        in_channels * kernels.0 * kernels.0,
                        filters.0,
                        filters.0 * in_channels * kernels.0 * kernels.0,
                    ),
                )?,
                // small positive bias keeps the padded canvas off the
                // relu kink, where subgradients are ill-defined
                bias: Tensor::param(vec![filters.0], vec![0.01; filters.0])?,
            };
            let c2 = ConvLayer {
                filters: Tensor::param(
                    vec![filters.1, filters.0, kernels.1, kernels.1],
                    xavier_uniform(
                        rng,
                        filters.0 * kernels.1 * kernels.1,
                        filters.1,
                        filters.1 * filters.0 * kernels.1 * kernels.1,
                    ),
                )?,
                bias: Tensor::param(vec![filters.1], vec![0.01; filters.1])?,
            };
            (Some(c1), Some(c2), filters.1 * side2 * side2)
        };

        let mut hidden = Vec::new();
        let mut width = flat_width;
        for &next in hidden_widths {
            hidden.push(Linear::new(next, width, rng)?);
            width = next;
        }
        let out = Linear::new(2, width, rng)?;
        Ok(Aggregator {
            conv1,
            conv2,
            pool_size,
            pool_stride,
            hidden,
            out,
            canvas,
            in_channels,
        })
    }

    /// Map an affinity stack to two class logits.
    pub fn aggregate(&self, stack_in: &AffinityStack) -> Result<Tensor> {
        if stack_in.channels.len() != self.in_channels {
            return Err(TapaError::Dimension(format!(
                "aggregate: {} channels, aggregator expects {}",
                stack_in.channels.len(),
                self.in_channels
            )));
        }
        if stack_in.canvas != self.canvas {
            return Err(TapaError::Dimension(format!(
                "aggregate: canvas {} vs {}",
                stack_in.canvas, self.canvas
            )));
        }
        let mut x = stack(&stack_in.channels)?;
        if let (Some(c1), Some(c2)) = (&self.conv1, &self.conv2) {
            for layer in [c1, c2] {
                x = conv2d(&x, &layer.filters, 1)?;
                x = add_channel_bias(&x, &layer.bias)?;
                x = relu(&x);
                x = maxpool2d(&x, self.pool_size, self.pool_stride)?;
            }
        }
        let mut v = reshape(&x, vec![x.numel()])?;
        for layer in &self.hidden {
            v = relu(&layer.apply(&v)?);
        }
        self.out.apply(&v)
    }
}

/// Predicted class from logits: argmax, with exact ties going to class 0.
pub fn predict(logits: &Tensor) -> u8 {
    let d = logits.data();
    if d[1] > d[0] {
        1
    } else {
        0
    }
}

/// Write affinity channels as TSV grids for inspection.
pub fn dump_affinity(stack_in: &AffinityStack, dir: &Path, pair_id: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (c, channel) in stack_in.channels.iter().enumerate() {
        let name = if c == 0 { "emb" } else { "topic" };
        let path = dir.join(format!("{}_{}.tsv", pair_id, name));
        let data = channel.data();
        let s = channel.shape();
        let mut out = String::new();
        for i in 0..s[0] {
            let row: Vec<String> = (0..s[1])
                .map(|j| format!("{:.6}", data[i * s[1] + j]))
                .collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}
