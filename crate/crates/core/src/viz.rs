//! Mask overlays: alpha-blend every labeled mask onto the image with a
//! deterministic color, then append a legend strip of swatches below.
//!
//! Colors come from hashing `(label, instance ordinal)` into a
//! high-contrast palette, with linear probing (and a channel rotation once
//! the palette wraps) so every instance in an image gets its own color —
//! including repeated labels. The same label sequence therefore colors
//! identically across runs.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Blend strength of mask color over image pixels.
pub const OVERLAY_ALPHA: f64 = 0.55;

/// Height in pixels of the legend strip appended below the overlay.
pub const LEGEND_HEIGHT: usize = 12;

/// High-contrast palette for overlays (hand-picked for pairwise
/// distinguishability on light and dark backgrounds).
const VIS_PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 105, 180],
    [0, 255, 127],
    [255, 69, 0],
    [72, 61, 139],
];

/// Colors assigned to this image's instances, in first-appearance order.
/// Repeated labels get numbered display names ("hand", "hand (2)", ...).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ColorLegend {
    pub entries: Vec<(String, [u8; 3])>,
}

impl ColorLegend {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("legend serializes");
        s.push('\n');
        s
    }
}

/// Deterministic instance color: hash `(label, ordinal)` into the palette,
/// then probe past colors already used in this image. After a full palette
/// lap the candidate channels rotate and shift so the supply never runs dry.
fn instance_color(label: &str, ordinal: usize, used: &[[u8; 3]]) -> [u8; 3] {
    let start = fnv1a64(&format!("{label}\u{1}{ordinal}")) as usize % VIS_PALETTE.len();
    let mut probe = 0usize;
    loop {
        let base = VIS_PALETTE[(start + probe) % VIS_PALETTE.len()];
        let lap = (probe / VIS_PALETTE.len()) as u8;
        let candidate = if lap == 0 {
            base
        } else {
            // rotate channels and nudge by a lap-dependent offset
            [
                base[1].wrapping_add(lap.wrapping_mul(53)),
                base[2].wrapping_add(lap.wrapping_mul(101)),
                base[0].wrapping_add(lap.wrapping_mul(197)),
            ]
        };
        if !used.contains(&candidate) {
            return candidate;
        }
        probe += 1;
    }
}

/// Alpha-blend binarized masks over `image` and append a legend strip.
///
/// Masks are binarized at 0.5 and painted in the given order (later masks
/// cover earlier ones where they overlap). With no masks the image comes
/// back unchanged alongside an empty legend; otherwise the output is
/// `LEGEND_HEIGHT` pixels taller than the input.
pub fn visualize_masks(
    image: &Array3<f64>,
    masks: &[(Array2<f64>, String)],
) -> Result<(Array3<f64>, ColorLegend)> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("overlay needs an RGB image, got {c} channels")));
    }
    for (i, (mask, _)) in masks.iter().enumerate() {
        if mask.dim() != (h, w) {
            return Err(Error::shape(format!(
                "mask {i} is {:?}, image plane is {:?}",
                mask.dim(),
                (h, w)
            )));
        }
    }
    if masks.is_empty() {
        return Ok((image.clone(), ColorLegend::default()));
    }

    let mut legend = ColorLegend::default();
    let mut used: Vec<[u8; 3]> = Vec::with_capacity(masks.len());
    let mut label_counts: std::collections::BTreeMap<&str, usize> =
        std::collections::BTreeMap::new();

    let mut out = Array3::<f64>::zeros((3, h + LEGEND_HEIGHT, w));
    out.slice_mut(ndarray::s![.., ..h, ..]).assign(image);
    // legend strip background: white
    out.slice_mut(ndarray::s![.., h.., ..]).fill(1.0);

    for (mask, label) in masks {
        let ordinal = *label_counts
            .entry(label.as_str())
            .and_modify(|n| *n += 1)
            .or_insert(0);
        let color = instance_color(label, ordinal, &used);
        used.push(color);
        let display = if ordinal == 0 {
            label.clone()
        } else {
            format!("{label} ({})", ordinal + 1)
        };
        legend.entries.push((display, color));

        let rgb = [
            color[0] as f64 / 255.0,
            color[1] as f64 / 255.0,
            color[2] as f64 / 255.0,
        ];
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] >= 0.5 {
                    for ch in 0..3 {
                        let v = out[[ch, y, x]];
                        out[[ch, y, x]] = (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * rgb[ch];
                    }
                }
            }
        }
    }

    // Swatches left to right in legend order.
    let n = legend.entries.len();
    let slot = (w / n.max(1)).clamp(4, 2 * LEGEND_HEIGHT).max(1);
    for (k, (_, color)) in legend.entries.iter().enumerate() {
        let x0 = k * slot;
        let x1 = ((k + 1) * slot).saturating_sub(1).min(w);
        if x0 >= w {
            break; // more entries than strip width; JSON legend keeps them all
        }
        for y in (h + 1)..(h + LEGEND_HEIGHT - 1) {
            for x in x0..x1 {
                for ch in 0..3 {
                    out[[ch, y, x]] = color[ch] as f64 / 255.0;
                }
            }
        }
    }

    Ok((out, legend))
}
