//! Bundle layouts of the intermediate pipeline artifacts.
//!
//! | bundle  | tensors                                                    | sidecars                 |
//! |---------|------------------------------------------------------------|--------------------------|
//! | scenes  | `image<i>` `[C,H,W]`                                       | `prompts.txt`, `objects.txt` |
//! | pairs   | `pair<i>.orig`, `pair<i>.pert` `[C,H,W]`                   | `prompts.txt`, `seeds.txt` |
//! | traces  | `trace.layers` `[L]`, `pair<i>.response` `[N]`, `pair<i>.{orig,pert}.logits` `[N,V]`, `pair<i>.{orig,pert}.hidden` `[L,N,D]` | |
//! | shifts  | `pair<i>.{delta,z,w}` `[N]`, `pair<i>.{m,mad,sigma}` `[1]` |                          |
//! | spaces  | `layer<l>.V` `[M,D]`, `layer<l>.S` `[D,k]`, `layer<l>.sigma` | `report.txt`           |
//!
//! Token ids and layer indices are stored as exact small integers in f32.
//! Text sidecars hold one space-separated list of decimal integers per line.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Result, VceError};
use crate::perturbation::{ContrastivePair, ImageTensor};
use crate::shift::ShiftRecord;
use crate::tensor_store::{read_bundle, write_bundle, Tensor, TensorMap};

pub const PROMPTS_FILE: &str = "prompts.txt";
pub const OBJECTS_FILE: &str = "objects.txt";
pub const SEEDS_FILE: &str = "seeds.txt";
pub const LAYERS_TENSOR: &str = "trace.layers";

pub fn write_token_lines(path: impl AsRef<Path>, lines: &[Vec<u32>]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for line in lines {
        let words: Vec<String> = line.iter().map(u32::to_string).collect();
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| VceError::io(path, e))
}

pub fn read_u64_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<u64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| VceError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<u64>().map_err(|_| {
                        VceError::Parse(format!(
                            "{}:{}: '{w}' is not a non-negative integer",
                            path.display(),
                            n + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    read_u64_lines(path)?
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|v| {
                    u32::try_from(v)
                        .map_err(|_| VceError::Parse(format!("{}: token {v} too large", path.display())))
                })
                .collect()
        })
        .collect()
}

fn tokens_to_f32(tokens: &[u32]) -> Vec<f32> {
    tokens.iter().map(|&t| t as f32).collect()
}

fn f32_to_index(name: &str, values: &[f32]) -> Result<Vec<u32>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as u32)
            } else {
                Err(VceError::Inconsistent {
                    name: name.to_string(),
                    reason: format!("{v} is not an integer id"),
                })
            }
        })
        .collect()
}

/// Number of `<prefix><i><suffix>` tensors, requiring indices `0..n`.
pub fn indexed_count(tensors: &TensorMap, prefix: &str, suffix: &str) -> Result<usize> {
    let mut indices: Vec<usize> = tensors
        .names()
        .filter_map(|n| n.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok())
        .collect();
    indices.sort_unstable();
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected {
            return Err(VceError::MissingTensor(format!("{prefix}{expected}{suffix}")));
        }
    }
    Ok(indices.len())
}

pub fn write_images(
    dir: impl AsRef<Path>,
    images: &[ImageTensor],
    prompts: &[Vec<u32>],
    objects: &[Vec<u32>],
) -> Result<()> {
    let dir = dir.as_ref();
    let tensors: Vec<Tensor> = images
        .iter()
        .enumerate()
        .map(|(i, im)| im.to_tensor(format!("image{i}")))
        .collect();
    write_bundle(&tensors, dir)?;
    write_token_lines(dir.join(PROMPTS_FILE), prompts)?;
    write_token_lines(dir.join(OBJECTS_FILE), objects)
}

pub fn read_images(dir: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let tensors = read_bundle(dir)?;
    let n = indexed_count(&tensors, "image", "")?;
    (0..n)
        .map(|i| ImageTensor::from_tensor(tensors.get(&format!("image{i}"))?))
        .collect()
}

pub fn write_pairs(dir: impl AsRef<Path>, pairs: &[ContrastivePair]) -> Result<()> {
    let dir = dir.as_ref();
    let mut tensors = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        tensors.push(p.original.to_tensor(format!("pair{i}.orig")));
        tensors.push(p.perturbed.to_tensor(format!("pair{i}.pert")));
    }
    write_bundle(&tensors, dir)?;
    let prompts: Vec<Vec<u32>> = pairs.iter().map(|p| p.prompt.clone()).collect();
    write_token_lines(dir.join(PROMPTS_FILE), &prompts)?;
    let seeds: String = pairs.iter().map(|p| format!("{}\n", p.seed)).collect();
    let path = dir.join(SEEDS_FILE);
    fs::write(&path, seeds).map_err(|e| VceError::io(path, e))
}

pub fn read_pairs(dir: impl AsRef<Path>) -> Result<Vec<ContrastivePair>> {
    let dir = dir.as_ref();
    let tensors = read_bundle(dir)?;
    let n = indexed_count(&tensors, "pair", ".orig")?;
    let prompts = read_token_lines(dir.join(PROMPTS_FILE))?;
    let seeds = read_u64_lines(dir.join(SEEDS_FILE))?;
    if prompts.len() != n || seeds.len() != n || seeds.iter().any(|s| s.len() != 1) {
        return Err(VceError::LengthMismatch(format!(
            "{n} pairs, {} prompt lines, {} seed lines in {}",
            prompts.len(),
            seeds.len(),
            dir.display()
        )));
    }
    (0..n)
        .map(|i| {
            let original = ImageTensor::from_tensor(tensors.get(&format!("pair{i}.orig"))?)?;
            let perturbed = ImageTensor::from_tensor(tensors.get(&format!("pair{i}.pert"))?)?;
            if !original.same_shape(&perturbed) {
                return Err(VceError::Shape(format!("pair {i}: image shapes differ")));
            }
            Ok(ContrastivePair {
                prompt: prompts[i].clone(),
                original,
                perturbed,
                seed: seeds[i][0],
            })
        })
        .collect()
}

/// Teacher-forced traces of one pair under both images.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub response: Vec<u32>,
    /// `N x V`
    pub orig_logits: Array2<f32>,
    pub pert_logits: Array2<f32>,
    /// `L x N x D`, layers as listed in the bundle.
    pub orig_hidden: Array3<f32>,
    pub pert_hidden: Array3<f32>,
}

impl TraceRecord {
    fn token_logits(&self, logits: &Array2<f32>) -> Vec<f32> {
        self.response
            .iter()
            .enumerate()
            .map(|(i, &t)| logits[[i, t as usize]])
            .collect()
    }

    pub fn orig_token_logits(&self) -> Vec<f32> {
        self.token_logits(&self.orig_logits)
    }

    pub fn pert_token_logits(&self) -> Vec<f32> {
        self.token_logits(&self.pert_logits)
    }

    /// `(h_pos, h_neg)` for the layer at position `slot` of the layer list.
    pub fn hidden_pair(&self, slot: usize) -> (ArrayView2<'_, f32>, ArrayView2<'_, f32>) {
        (
            self.orig_hidden.index_axis(Axis(0), slot),
            self.pert_hidden.index_axis(Axis(0), slot),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    /// Model layer of each hidden-state slot.
    pub layers: Vec<usize>,
    pub records: Vec<TraceRecord>,
}

impl TraceSet {
    pub fn slot(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or(VceError::MissingLayer(layer))
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::from_vec(
            LAYERS_TENSOR,
            self.layers.iter().map(|&l| l as f32).collect(),
        )];
        for (i, r) in self.records.iter().enumerate() {
            out.push(Tensor::from_vec(format!("pair{i}.response"), tokens_to_f32(&r.response)));
            out.push(Tensor::from_array2(format!("pair{i}.orig.logits"), &r.orig_logits));
            out.push(Tensor::from_array2(format!("pair{i}.pert.logits"), &r.pert_logits));
            out.push(Tensor::from_array3(format!("pair{i}.orig.hidden"), &r.orig_hidden));
            out.push(Tensor::from_array3(format!("pair{i}.pert.hidden"), &r.pert_hidden));
        }
        out
    }

    pub fn from_tensors(tensors: &TensorMap) -> Result<Self> {
        let layers: Vec<usize> = f32_to_index(LAYERS_TENSOR, tensors.get(LAYERS_TENSOR)?.data())?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        let n = indexed_count(tensors, "pair", ".response")?;
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let name = format!("pair{i}.response");
            let response = f32_to_index(&name, tensors.get(&name)?.data())?;
            let get2 = |s: &str| tensors.get(&format!("pair{i}.{s}"))?.to_array2();
            let get3 = |s: &str| tensors.get(&format!("pair{i}.{s}"))?.to_array3();
            let r = TraceRecord {
                orig_logits: get2("orig.logits")?,
                pert_logits: get2("pert.logits")?,
                orig_hidden: get3("orig.hidden")?,
                pert_hidden: get3("pert.hidden")?,
                response,
            };
            let nr = r.response.len();
            let v = r.orig_logits.ncols();
            let hd = r.orig_hidden.dim();
            let consistent = r.orig_logits.nrows() == nr
                && r.pert_logits.dim() == (nr, v)
                && hd.0 == layers.len()
                && hd.1 == nr
                && r.pert_hidden.dim() == hd
                && r.response.iter().all(|&t| (t as usize) < v);
            if !consistent {
                return Err(VceError::Shape(format!(
                    "pair {i}: response of {nr} tokens, logits {:?}/{:?}, hidden {:?}/{:?} for {} layers",
                    r.orig_logits.dim(),
                    r.pert_logits.dim(),
                    hd,
                    r.pert_hidden.dim(),
                    layers.len()
                )));
            }
            records.push(r);
        }
        Ok(Self { layers, records })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_bundle(&self.to_tensors(), dir).map(|_| ())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&read_bundle(dir)?)
    }
}

fn f32s(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}

pub fn write_shifts(dir: impl AsRef<Path>, records: &[ShiftRecord]) -> Result<()> {
    let mut tensors = Vec::with_capacity(6 * records.len());
    for (i, r) in records.iter().enumerate() {
        tensors.push(Tensor::from_vec(format!("pair{i}.delta"), f32s(&r.delta)));
        tensors.push(Tensor::from_vec(format!("pair{i}.z"), f32s(&r.z)));
        tensors.push(Tensor::from_vec(format!("pair{i}.w"), f32s(&r.weights)));
        tensors.push(Tensor::scalar(format!("pair{i}.m"), r.median as f32));
        tensors.push(Tensor::scalar(format!("pair{i}.mad"), r.mad as f32));
        tensors.push(Tensor::scalar(format!("pair{i}.sigma"), r.sigma as f32));
    }
    write_bundle(&tensors, dir).map(|_| ())
}

/// Per-pair token weights as stored (f32 widened to f64).
pub fn read_weights(dir: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let tensors = read_bundle(dir)?;
    let n = indexed_count(&tensors, "pair", ".w")?;
    (0..n)
        .map(|i| {
            Ok(tensors
                .get(&format!("pair{i}.w"))?
                .data()
                .iter()
                .map(|&w| w as f64)
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{weigh_shifts, ScheduleParams};

    #[test]
    fn token_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let lines = vec![vec![1, 2, 3], vec![], vec![63]];
        write_token_lines(&p, &lines).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "1 2 3\n\n63\n");
        assert_eq!(read_token_lines(&p).unwrap(), lines);
        fs::write(&p, "1 x\n").unwrap();
        assert!(matches!(read_token_lines(&p), Err(VceError::Parse(_))));
    }

    #[test]
    fn indexed_count_requires_contiguity() {
        let mut t = TensorMap::new();
        t.insert(Tensor::scalar("pair0.w", 1.0)).unwrap();
        t.insert(Tensor::scalar("pair1.w", 1.0)).unwrap();
        t.insert(Tensor::scalar("pair1.z", 1.0)).unwrap();
        assert_eq!(indexed_count(&t, "pair", ".w").unwrap(), 2);
        t.insert(Tensor::scalar("pair3.w", 1.0)).unwrap();
        assert!(indexed_count(&t, "pair", ".w").is_err());
    }

    fn record(n: usize, layers: usize, seed: f32) -> TraceRecord {
        TraceRecord {
            response: (0..n as u32).collect(),
            orig_logits: Array2::from_shape_fn((n, 5), |(i, j)| seed + (i * 5 + j) as f32),
            pert_logits: Array2::from_shape_fn((n, 5), |(i, j)| seed - (i + j) as f32),
            orig_hidden: Array3::from_shape_fn((layers, n, 3), |(a, b, c)| (a + b * c) as f32),
            pert_hidden: Array3::from_shape_fn((layers, n, 3), |(a, b, c)| (a * b + c) as f32 + seed),
        }
    }

    #[test]
    fn traces_round_trip() {
        let set = TraceSet {
            layers: vec![4, 5],
            records: vec![record(3, 2, 0.5), record(1, 2, -2.0)],
        };
        let dir = tempfile::tempdir().unwrap();
        set.write(dir.path()).unwrap();
        let back = TraceSet::read(dir.path()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.slot(5).unwrap(), 1);
        assert!(matches!(back.slot(2), Err(VceError::MissingLayer(2))));
        assert_eq!(set.records[0].orig_token_logits(), vec![0.5, 6.5, 12.5]);
    }

    #[test]
    fn inconsistent_trace_is_rejected() {
        let mut tensors: TensorMap = TraceSet {
            layers: vec![0],
            records: vec![record(2, 1, 0.0)],
        }
        .to_tensors()
        .into_iter()
        .collect();
        tensors.replace(Tensor::from_vec("pair0.response", vec![0.0, 1.0, 2.0]));
        assert!(matches!(TraceSet::from_tensors(&tensors), Err(VceError::Shape(_))));
        tensors.replace(Tensor::from_vec("pair0.response", vec![0.0, 1.5]));
        assert!(TraceSet::from_tensors(&tensors).is_err());
    }

    #[test]
    fn pairs_and_shifts_round_trip() {
        let im = |v: f32| ImageTensor::new(1, 2, 2, vec![v; 4]).unwrap();
        let pairs = vec![
            ContrastivePair {
                prompt: vec![62, 63],
                original: im(1.0),
                perturbed: im(0.5),
                seed: 7,
            },
            ContrastivePair {
                prompt: vec![5],
                original: im(-1.0),
                perturbed: im(0.25),
                seed: 8,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        assert_eq!(read_pairs(dir.path()).unwrap(), pairs);
        assert_eq!(fs::read_to_string(dir.path().join(SEEDS_FILE)).unwrap(), "7\n8\n");

        let rec = weigh_shifts(vec![0.0, 2.0, 4.0], &ScheduleParams::default()).unwrap();
        let sdir = tempfile::tempdir().unwrap();
        write_shifts(sdir.path(), std::slice::from_ref(&rec)).unwrap();
        let w = read_weights(sdir.path()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], f32s(&rec.weights).iter().map(|&x| x as f64).collect::<Vec<_>>());
        let t = read_bundle(sdir.path()).unwrap();
        assert_eq!(t.get("pair0.sigma").unwrap().scalar_value().unwrap(), 2.9652f32);
    }

    #[test]
    fn images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![ImageTensor::new(1, 2, 2, vec![0.0, 1.0, -1.0, 0.5]).unwrap()];
        write_images(dir.path(), &images, &[vec![62, 63]], &[vec![2, 5]]).unwrap();
        assert_eq!(read_images(dir.path()).unwrap(), images);
        assert_eq!(read_token_lines(dir.path().join(OBJECTS_FILE)).unwrap(), vec![vec![2, 5]]);
    }
}
