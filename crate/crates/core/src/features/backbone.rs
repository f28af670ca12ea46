use crate::diff::{ParameterStore, Prng, Tape, Var};
use crate::error::{shape_err, Result};
use crate::Modality;

fn conv_name(modality: Modality, block: usize, part: &str) -> String {
    format!("backbone.{}.conv{}.{part}", modality.name(), block + 1)
}

/// Each block halves the spatial size.
pub fn total_stride(blocks: usize) -> usize {
    1 << blocks
}

/// One 3x3 conv per block; `widths[i]` is block `i`'s output channels.
pub fn register_backbone(store: &mut ParameterStore, modality: Modality, in_channels: usize, widths: &[usize], rng: &mut Prng) {
    let mut cin = in_channels;
    for (i, &cout) in widths.iter().enumerate() {
        store.insert_glorot(conv_name(modality, i, "weight"), &[cout, cin, 3, 3], cin * 9, cout * 9, rng);
        store.insert_zeros(conv_name(modality, i, "bias"), &[cout]);
        cin = cout;
    }
}

/// (B, 3, H, W) -> (B, C, H / 2^blocks, W / 2^blocks) through blocks of
/// conv, relu and 2x2 average pooling.
pub fn backbone(tape: &mut Tape, store: &ParameterStore, modality: Modality, x: Var, blocks: usize) -> Result<Var> {
    let s = tape.shape(x);
    let stride = total_stride(blocks);
    if s.len() != 4 || s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(shape_err("backbone", format!("input {s:?} with total stride {stride}")));
    }
    let mut h = x;
    for i in 0..blocks {
        let w = tape.param(store, &conv_name(modality, i, "weight"))?;
        let b = tape.param(store, &conv_name(modality, i, "bias"))?;
        h = tape.conv2d(h, w, b, 1)?;
        h = tape.relu(h)?;
        h = tape.avg_pool2(h)?;
    }
    Ok(h)
}
