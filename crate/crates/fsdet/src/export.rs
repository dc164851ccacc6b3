//! Dataset export for inspection.
//!
//! Images are written as uncompressed PAM (`P7`) files:
//!
//! ```text
//! P7
//! WIDTH <w>
//! HEIGHT <h>
//! DEPTH <3 for RGB, 1 for masks>
//! MAXVAL 255
//! TUPLTYPE <RGB | GRAYSCALE>
//! ENDHDR
//! <h * w * depth bytes, row-major, channels interleaved>
//! ```
//!
//! Each directory also holds `annotations.csv` with columns
//! `image_id,class_id,x1,y1,x2,y2` (pixel coordinates, x2/y2 exclusive).

use std::path::{Path, PathBuf};

use fsdet_core::boxes::RoIBox;
use fsdet_core::episodes::{self, EpisodeSampler, Phase, SplitConfig};
use fsdet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};

/// Encodes a `[D, H, W]` tensor with values in `[0, 1]` (D = 1 or 3).
pub fn encode_pam(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(CliError::Config(format!("PAM export needs [1|3, H, W], got {s:?}")));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let tupl = if d == 3 { "RGB" } else { "GRAYSCALE" };
    let mut out = format!("P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH {d}\nMAXVAL 255\nTUPLTYPE {tupl}\nENDHDR\n").into_bytes();
    let px = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                out.push((px[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Parses a PAM file back into a `[D, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_pam(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let end = bytes.windows(7).position(|w| w == b"ENDHDR\n").ok_or("missing ENDHDR")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next() != Some("P7") {
        return Err("missing P7 magic".into());
    }
    let (mut w, mut h, mut d, mut maxval) = (0usize, 0usize, 0usize, 0usize);
    for line in lines {
        let mut it = line.split_whitespace();
        let (Some(key), Some(val)) = (it.next(), it.next()) else { continue };
        let parse = || val.parse::<usize>().map_err(|_| format!("bad {key}"));
        match key {
            "WIDTH" => w = parse()?,
            "HEIGHT" => h = parse()?,
            "DEPTH" => d = parse()?,
            "MAXVAL" => maxval = parse()?,
            _ => {}
        }
    }
    if maxval != 255 {
        return Err(format!("unsupported MAXVAL {maxval}"));
    }
    let body = &bytes[end + 7..];
    if body.len() != w * h * d {
        return Err(format!("expected {} pixel bytes, found {}", w * h * d, body.len()));
    }
    let mut data = vec![0.0f32; d * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                data[(c * h + y) * w + x] = body[(y * w + x) * d + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[d, h, w], data).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct AnnotationRow<'a> {
    image_id: &'a str,
    class_id: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

struct DirWriter {
    dir: PathBuf,
    csv: csv::Writer<std::fs::File>,
    images: usize,
}

impl DirWriter {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let path = dir.join("annotations.csv");
        let f = std::fs::File::create(&path).map_err(CliError::io(&path))?;
        Ok(DirWriter { dir, csv: csv::Writer::from_writer(f), images: 0 })
    }

    fn image(&mut self, id: &str, image: &Tensor<f32>, boxes: &[RoIBox]) -> Result<()> {
        let path = self.dir.join(format!("{id}.pam"));
        std::fs::write(&path, encode_pam(image)?).map_err(CliError::io(&path))?;
        for b in boxes {
            self.csv.serialize(AnnotationRow {
                image_id: id,
                class_id: b.class_id.unwrap_or(usize::MAX),
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            })?;
        }
        self.images += 1;
        Ok(())
    }

    fn mask(&mut self, id: &str, mask: &Tensor<f32>) -> Result<()> {
        let s = mask.shape();
        let m = mask.clone().reshape(&[1, s[s.len() - 2], s[s.len() - 1]])?;
        let path = self.dir.join(format!("{id}.pam"));
        std::fs::write(&path, encode_pam(&m)?).map_err(CliError::io(&path))
    }

    fn finish(mut self) -> Result<usize> {
        self.csv.flush().map_err(CliError::io(self.dir.join("annotations.csv")))?;
        Ok(self.images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportSummary {
    pub directories: Vec<PathBuf>,
    pub images: usize,
}

/// Writes `split<s>/test` (the evaluation stream) and, for each run,
/// `split<s>/run<r>` holding the pooled support shots with their masks
/// and `queries_per_run` fine-tuning queries.
pub fn export_dataset(
    out: &Path,
    dataset_seed: u64,
    split: &SplitConfig,
    k: usize,
    runs: usize,
    test_images: usize,
    queries_per_run: usize,
) -> Result<ExportSummary> {
    let root = out.join(format!("split{}", split.split_id));
    let mut summary = ExportSummary { directories: Vec::new(), images: 0 };
    let mut w = DirWriter::new(root.join("test"))?;
    for t in episodes::test_stream(dataset_seed, split, test_images)? {
        w.image(&format!("test_{:04}", t.image_id), &t.image, &t.gt)?;
    }
    summary.directories.push(root.join("test"));
    summary.images += w.finish()?;
    for run in 0..runs as u64 {
        let dir = root.join(format!("run{run}"));
        let mut w = DirWriter::new(dir.clone())?;
        let budget = episodes::build_shot_pool(dataset_seed, split, k, run)?;
        let mut rng = ChaCha8Rng::seed_from_u64(episodes::stream_seed(&[dataset_seed, run, 0x6578]));
        let mut idx = 0;
        for c in split.all_classes() {
            for &inst in budget.instances(c) {
                let s = episodes::render_support(inst, None, &mut rng)?;
                let id = format!("support_{idx:04}");
                w.image(&id, &s.image, &s.boxes)?;
                w.mask(&format!("{id}_mask"), &s.mask)?;
                idx += 1;
            }
        }
        let mut sampler = EpisodeSampler::new(dataset_seed, split.clone(), Phase::FineTune, Some(budget), run);
        for q in 0..queries_per_run {
            let ep = sampler.next_episode()?;
            w.image(&format!("query_{q:04}"), &ep.query, &ep.gt)?;
        }
        summary.images += w.finish()?;
        summary.directories.push(dir);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pam_roundtrip_is_exact_on_8_bit_values() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4 % 256) as f32 / 255.0).collect();
        let t = Tensor::new(&[3, 4, 5], data).unwrap();
        let bytes = encode_pam(&t).unwrap();
        assert!(bytes.starts_with(b"P7\nWIDTH 5\nHEIGHT 4\nDEPTH 3\n"));
        assert_eq!(decode_pam(&bytes).unwrap(), t);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_pam(b"P6\n1 1\n255\n\0\0\0").is_err());
        let t = Tensor::<f32>::zeros(&[1, 2, 2]);
        let mut b = encode_pam(&t).unwrap();
        b.pop();
        assert!(decode_pam(&b).is_err());
    }
}
