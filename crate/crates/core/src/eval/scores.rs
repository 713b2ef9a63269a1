use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

fn check_binary(mask: &[u8], name: &str) -> Result<()> {
    match mask.iter().position(|v| *v > 1) {
        Some(i) => Err(Error::NonBinaryMask(format!("{name} has value {} at index {i}", mask[i]))),
        None => Ok(()),
    }
}

/// True positive, false positive and false negative pixel counts.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<(u64, u64, u64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("mask sizes differ: {} vs {}", pred.len(), truth.len())));
    }
    check_binary(pred, "prediction")?;
    check_binary(truth, "ground truth")?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fn_))
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// `2 TP / (2 TP + FP + FN)` over pixels; 1.0 when both masks are empty.
pub fn pixel_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    let (tp, fp, fn_) = confusion(pred, truth)?;
    Ok(f1_from_counts(tp, fp, fn_))
}

/// 4-connected foreground components; 0 is background, labels start at 1.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
    }
    (labels, next)
}

/// F1 over connected components, matching predicted to true objects greedily
/// by descending IoU, accepting pairs with IoU at or above `iou_threshold`.
pub fn object_f1(pred: &[u8], truth: &[u8], height: usize, width: usize, iou_threshold: f64) -> Result<f64> {
    if pred.len() != height * width || truth.len() != height * width {
        return Err(Error::Shape(format!("masks must hold {height}x{width} pixels")));
    }
    check_binary(pred, "prediction")?;
    check_binary(truth, "ground truth")?;
    let (pl, np) = connected_components(pred, height, width);
    let (tl, nt) = connected_components(truth, height, width);
    let mut area_p = vec![0u64; np as usize + 1];
    let mut area_t = vec![0u64; nt as usize + 1];
    let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (a, b) in pl.iter().zip(&tl) {
        area_p[*a as usize] += 1;
        area_t[*b as usize] += 1;
        if *a > 0 && *b > 0 {
            *overlap.entry((*a, *b)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u32, u32)> = overlap
        .into_iter()
        .map(|((a, b), inter)| {
            let union = area_p[a as usize] + area_t[b as usize] - inter;
            (inter as f64 / union as f64, a, b)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_p = vec![false; np as usize + 1];
    let mut used_t = vec![false; nt as usize + 1];
    let mut matched = 0u64;
    for (iou, a, b) in pairs {
        if iou >= iou_threshold && !used_p[a as usize] && !used_t[b as usize] {
            used_p[a as usize] = true;
            used_t[b as usize] = true;
            matched += 1;
        }
    }
    Ok(f1_from_counts(matched, np as u64 - matched, nt as u64 - matched))
}
