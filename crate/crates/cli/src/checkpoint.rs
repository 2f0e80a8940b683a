//! Checkpoint container: a `manifest.json` index plus one blob file per
//! tensor group.
//!
//! Real tensors are stored as little-endian `f32` in `f32.bin`. Boolean
//! kernels are stored in `bits.bin` as the little-endian bytes of their
//! packed 64-bit words: row-major, least significant bit first, each row
//! padded with zero bits to a word boundary. Every index entry carries the
//! FNV-1a 64-bit hash of its bytes.
//!
//! Tensor names:
//!
//! ```text
//! <param>                     full-precision tensors (embeddings, norms, lm_head)
//! <weight>.weight             teacher weight, m×n
//! <weight>.k<j>.bits          student kernel j, m×n bits
//! <weight>.k<j>.s_out         m
//! <weight>.k<j>.s_in          n
//! <weight>.bias               m
//! ```
//!
//! Values are rounded to `f32` on save, so `load(save(m))` equals `m` exactly
//! whenever every value of `m` is representable in `f32`, and
//! `save(load(save(m)))` reproduces the files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mbk_core::linear::{BooleanLinear, DenseLinear, LinearOp, TrainPolicy};
use mbk_core::svid::SvidKernel;
use mbk_core::tensor::{BitMatrix, DenseMatrix};
use mbk_core::zoo::{build_teacher, Descriptor, Network, Student, Teacher};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const F32_BLOB: &str = "f32.bin";
pub const BITS_BLOB: &str = "bits.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// FNV-1a 64 of the tensor's bytes, as 16 lowercase hex digits.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: Kind,
    pub descriptor: Descriptor,
    /// Kernels per designated weight; empty for a teacher.
    pub kernel_counts: BTreeMap<String, usize>,
    pub tensors: Vec<TensorEntry>,
}

/// A model read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Teacher(Teacher),
    Student(Student),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

#[derive(Default)]
struct Writer {
    f32_blob: Vec<u8>,
    bits_blob: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        let (file, blob) = match dtype {
            Dtype::F32 => (F32_BLOB, &mut self.f32_blob),
            Dtype::Bits => (BITS_BLOB, &mut self.bits_blob),
        };
        self.entries.push(TensorEntry {
            name,
            file: file.to_string(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            shape,
            dtype,
            checksum: format!("{:016x}", fnv1a64(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }

    fn matrix(&mut self, name: String, m: &DenseMatrix) {
        self.push(
            name,
            Dtype::F32,
            vec![m.rows(), m.cols()],
            f32_bytes(m.as_slice()),
        );
    }

    fn vector(&mut self, name: String, v: &[f64]) {
        self.push(name, Dtype::F32, vec![v.len()], f32_bytes(v));
    }

    fn bits(&mut self, name: String, b: &BitMatrix) {
        self.push(name, Dtype::Bits, vec![b.rows(), b.cols()], b.to_le_bytes());
    }

    fn finish(
        self,
        dir: &Path,
        kind: Kind,
        descriptor: Descriptor,
        kernel_counts: BTreeMap<String, usize>,
    ) -> CliResult<Manifest> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind,
            descriptor,
            kernel_counts,
            tensors: self.entries,
        };
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::runtime(format!("serializing manifest: {e}")))?;
        text.push('\n');
        write(&dir.join(MANIFEST), text.as_bytes())?;
        write(&dir.join(F32_BLOB), &self.f32_blob)?;
        let bits = dir.join(BITS_BLOB);
        if self.bits_blob.is_empty() {
            if bits.exists() {
                fs::remove_file(&bits).map_err(|e| CliError::io(&bits, e))?;
            }
        } else {
            write(&bits, &self.bits_blob)?;
        }
        Ok(manifest)
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn fp_tensors<N: Network>(w: &mut Writer, model: &N) {
    for (name, p) in model.fp_params() {
        w.matrix(name, &p.value);
    }
}

pub fn save_teacher(dir: &Path, model: &Teacher) -> CliResult<Manifest> {
    let mut w = Writer::default();
    fp_tensors(&mut w, model);
    for (name, lin) in model.linears() {
        w.matrix(format!("{name}.weight"), &lin.weight);
        if let Some(b) = &lin.bias {
            w.vector(format!("{name}.bias"), b);
        }
    }
    w.finish(dir, Kind::Teacher, model.descriptor(), BTreeMap::new())
}

pub fn save_student(dir: &Path, model: &Student) -> CliResult<Manifest> {
    let mut w = Writer::default();
    let mut counts = BTreeMap::new();
    fp_tensors(&mut w, model);
    for (name, lin) in model.linears() {
        counts.insert(name.clone(), lin.num_kernels());
        for (j, k) in lin.kernels().iter().enumerate() {
            w.bits(format!("{name}.k{j}.bits"), &k.bits);
            w.vector(format!("{name}.k{j}.s_out"), &k.s_out);
            w.vector(format!("{name}.k{j}.s_in"), &k.s_in);
        }
        if let Some(b) = &lin.bias {
            w.vector(format!("{name}.bias"), b);
        }
    }
    w.finish(dir, Kind::Student, model.descriptor(), counts)
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CliError::validation(format!(
            "{}: unsupported format version {}",
            path.display(),
            m.format_version
        )));
    }
    m.descriptor.validate()?;
    Ok(m)
}

/// Verified tensor bytes keyed by name; every entry must be consumed.
struct Reader {
    tensors: BTreeMap<String, (TensorEntry, Vec<u8>)>,
}

impl Reader {
    fn open(dir: &Path, manifest: &Manifest) -> CliResult<Self> {
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            if !blobs.contains_key(&e.file) {
                if e.file != F32_BLOB && e.file != BITS_BLOB {
                    return Err(CliError::validation(format!(
                        "tensor '{}' names unknown file '{}'",
                        e.name, e.file
                    )));
                }
                let path = dir.join(&e.file);
                blobs.insert(
                    e.file.clone(),
                    fs::read(&path).map_err(|err| CliError::io(&path, err))?,
                );
            }
            let blob = &blobs[&e.file];
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(CliError::validation(format!(
                    "tensor '{}' lies outside {}",
                    e.name, e.file
                )));
            };
            let bytes = blob[e.offset as usize..end as usize].to_vec();
            let sum = format!("{:016x}", fnv1a64(&bytes));
            if sum != e.checksum {
                return Err(CliError::validation(format!(
                    "checksum mismatch for '{}': manifest {}, data {sum}",
                    e.name, e.checksum
                )));
            }
            let expected = match (e.dtype, e.shape.as_slice()) {
                (Dtype::F32, shape) if !shape.is_empty() => shape.iter().product::<usize>() * 4,
                (Dtype::Bits, [rows, cols]) => rows * cols.div_ceil(64) * 8,
                _ => {
                    return Err(CliError::validation(format!(
                        "tensor '{}' has bad shape {:?}",
                        e.name, e.shape
                    )))
                }
            };
            if expected as u64 != e.length {
                return Err(CliError::validation(format!(
                    "tensor '{}' has {} bytes, shape {:?} needs {expected}",
                    e.name, e.length, e.shape
                )));
            }
            if tensors.insert(e.name.clone(), (e.clone(), bytes)).is_some() {
                return Err(CliError::validation(format!(
                    "duplicate tensor '{}'",
                    e.name
                )));
            }
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str, dtype: Dtype) -> CliResult<(Vec<usize>, Vec<u8>)> {
        let (e, bytes) = self
            .tensors
            .remove(name)
            .ok_or_else(|| CliError::validation(format!("checkpoint lacks tensor '{name}'")))?;
        if e.dtype != dtype {
            return Err(CliError::validation(format!(
                "tensor '{name}' has dtype {:?}",
                e.dtype
            )));
        }
        Ok((e.shape, bytes))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> CliResult<DenseMatrix> {
        let (shape, bytes) = self.take(name, Dtype::F32)?;
        if shape != [rows, cols] {
            return Err(CliError::validation(format!(
                "tensor '{name}' has shape {shape:?}, model needs [{rows}, {cols}]"
            )));
        }
        Ok(DenseMatrix::new(rows, cols, f32_values(&bytes))?)
    }

    fn vector(&mut self, name: &str, len: usize) -> CliResult<Vec<f64>> {
        let (shape, bytes) = self.take(name, Dtype::F32)?;
        if shape != [len] {
            return Err(CliError::validation(format!(
                "tensor '{name}' has shape {shape:?}, model needs [{len}]"
            )));
        }
        Ok(f32_values(&bytes))
    }

    fn bits(&mut self, name: &str, rows: usize, cols: usize) -> CliResult<BitMatrix> {
        let (shape, bytes) = self.take(name, Dtype::Bits)?;
        if shape != [rows, cols] {
            return Err(CliError::validation(format!(
                "tensor '{name}' has shape {shape:?}, model needs [{rows}, {cols}]"
            )));
        }
        let b = BitMatrix::from_le_bytes(rows, cols, &bytes)?;
        if !b.padding_is_zero() {
            return Err(CliError::validation(format!(
                "tensor '{name}' has nonzero padding bits"
            )));
        }
        Ok(b)
    }

    fn finish(self) -> CliResult<()> {
        match self.tensors.keys().next() {
            Some(extra) => Err(CliError::validation(format!(
                "checkpoint has unused tensor '{extra}'"
            ))),
            None => Ok(()),
        }
    }
}

fn fill_fp<N: Network>(r: &mut Reader, model: &mut N) -> CliResult<()> {
    for (name, p) in model.fp_params_mut() {
        let (rows, cols) = p.value.shape();
        p.value = r.matrix(&name, rows, cols)?;
    }
    Ok(())
}

fn load_teacher_parts(r: &mut Reader, descriptor: &Descriptor) -> CliResult<Teacher> {
    let mut model = build_teacher(descriptor, 0)?;
    fill_fp(r, &mut model)?;
    for (name, lin) in model.linears_mut() {
        let (m, n) = (lin.out_features(), lin.in_features());
        lin.weight = r.matrix(&format!("{name}.weight"), m, n)?;
        if lin.bias.is_some() {
            lin.bias = Some(r.vector(&format!("{name}.bias"), m)?);
        }
    }
    Ok(model)
}

fn load_student_parts(r: &mut Reader, manifest: &Manifest) -> CliResult<Student> {
    let mut skeleton = build_teacher(&manifest.descriptor, 0)?;
    fill_fp(r, &mut skeleton)?;
    let names: Vec<String> = skeleton.linears().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = manifest.kernel_counts.keys().find(|k| !names.contains(k)) {
        return Err(CliError::validation(format!(
            "kernel count for unknown weight '{extra}'"
        )));
    }
    let mut failure = None;
    let student = skeleton.map_linears(|name, lin: &DenseLinear| {
        let built = (|| -> CliResult<BooleanLinear> {
            let (m, n) = (lin.out_features(), lin.in_features());
            let k = *manifest
                .kernel_counts
                .get(name)
                .ok_or_else(|| CliError::validation(format!("no kernel count for '{name}'")))?;
            let mut kernels = Vec::with_capacity(k);
            for j in 0..k {
                let bits = r.bits(&format!("{name}.k{j}.bits"), m, n)?;
                let s_out = r.vector(&format!("{name}.k{j}.s_out"), m)?;
                let s_in = r.vector(&format!("{name}.k{j}.s_in"), n)?;
                kernels.push(SvidKernel::new(bits, s_out, s_in)?);
            }
            let bias = match lin.bias {
                Some(_) => Some(r.vector(&format!("{name}.bias"), m)?),
                None => None,
            };
            Ok(BooleanLinear::new(kernels, bias, &TrainPolicy::LastOnly)?)
        })();
        built.map_err(|e| {
            let core = mbk_core::Error::Invalid(e.to_string());
            failure = Some(e);
            core
        })
    });
    match (student, failure) {
        (_, Some(e)) => Err(e),
        (Ok(s), None) => Ok(s),
        (Err(e), None) => Err(e.into()),
    }
}

/// Loads and verifies a checkpoint of either kind.
pub fn load(dir: &Path) -> CliResult<Loaded> {
    let manifest = read_manifest(dir)?;
    let mut r = Reader::open(dir, &manifest)?;
    let loaded = match manifest.kind {
        Kind::Teacher => {
            if !manifest.kernel_counts.is_empty() {
                return Err(CliError::validation(
                    "teacher checkpoint lists kernel counts",
                ));
            }
            Loaded::Teacher(load_teacher_parts(&mut r, &manifest.descriptor)?)
        }
        Kind::Student => Loaded::Student(load_student_parts(&mut r, &manifest)?),
    };
    r.finish()?;
    Ok(loaded)
}

pub fn load_teacher(dir: &Path) -> CliResult<Teacher> {
    match load(dir)? {
        Loaded::Teacher(t) => Ok(t),
        Loaded::Student(_) => Err(CliError::validation(format!(
            "{} holds a student, expected a teacher",
            dir.display()
        ))),
    }
}

pub fn load_student(dir: &Path) -> CliResult<Student> {
    match load(dir)? {
        Loaded::Student(s) => Ok(s),
        Loaded::Teacher(_) => Err(CliError::validation(format!(
            "{} holds a teacher, expected a student",
            dir.display()
        ))),
    }
}

/// Bytes of Boolean payload and of scale vectors in a student manifest.
pub fn payload_bytes(manifest: &Manifest) -> (u64, u64) {
    let bits = manifest
        .tensors
        .iter()
        .filter(|e| e.dtype == Dtype::Bits)
        .map(|e| e.length)
        .sum();
    let scales = manifest
        .tensors
        .iter()
        .filter(|e| e.name.ends_with(".s_out") || e.name.ends_with(".s_in"))
        .map(|e| e.length)
        .sum();
    (bits, scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbk_core::zoo::{booleanize, KernelPlan, TransformerConfig};

    fn tiny() -> Descriptor {
        Descriptor::Transformer(TransformerConfig {
            vocab: 7,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            context: 5,
        })
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn teacher_roundtrip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let t = build_teacher(&tiny(), 3).unwrap();
        save_teacher(&dir.path().join("a"), &t).unwrap();
        let once = load_teacher(&dir.path().join("a")).unwrap();
        save_teacher(&dir.path().join("b"), &once).unwrap();
        let twice = load_teacher(&dir.path().join("b")).unwrap();
        assert_eq!(once, twice);
        for f in [MANIFEST, F32_BLOB] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        assert!(!dir.path().join("a").join(BITS_BLOB).exists());
    }

    #[test]
    fn student_roundtrip_keeps_bits() {
        let dir = tempfile::tempdir().unwrap();
        let t = build_teacher(&tiny(), 4).unwrap();
        let s = booleanize(&t, &KernelPlan::Uniform(3), &TrainPolicy::LastOnly).unwrap();
        let m = save_student(dir.path(), &s).unwrap();
        assert_eq!(
            m.kernel_counts.values().copied().collect::<Vec<_>>(),
            vec![3; 6]
        );
        let back = load_student(dir.path()).unwrap();
        for ((_, a), (_, b)) in s.linears().into_iter().zip(back.linears()) {
            for (ka, kb) in a.kernels().iter().zip(b.kernels()) {
                assert_eq!(ka.bits, kb.bits);
            }
        }
        assert!(load_teacher(dir.path()).is_err());
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let t = build_teacher(&tiny(), 5).unwrap();
        save_teacher(dir.path(), &t).unwrap();
        let path = dir.path().join(F32_BLOB);
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 1;
        fs::write(&path, bytes).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_directory_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load(&dir.path().join("nope")).unwrap_err().exit_code(), 2);
    }
}
