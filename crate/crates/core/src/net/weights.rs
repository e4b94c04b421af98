use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"GACN";
pub const FORMAT_VERSION: u32 = 1;

/// Largest accepted tensor rank and name length; anything above is treated
/// as corruption rather than allocated.
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 1 << 12;

/// Named parameter tensors for both network paths.
///
/// Values are kept exactly representable as `f32` (see [`round_to_f32`]) so
/// that the on-disk `f32` payload round-trips bit-for-bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Round every element to the nearest `f32`.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Kaiming-uniform (fan-in) weights and zero biases for `layout`.
    ///
    /// Fan-in is the product of all dims but the first; rank-1 tensors are biases.
    pub fn kaiming_uniform(layout: &[(String, Vec<usize>)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for (name, shape) in layout {
            let mut t = if shape.len() == 1 {
                Tensor::zeros(shape.clone())
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape.clone(), |_| rng.gen_range(-bound..bound))
            };
            round_to_f32(&mut t);
            store.insert(name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing weight '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Check that the store holds exactly `layout`, with matching shapes.
    pub fn validate(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in layout {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weights",
                    format!(
                        "'{name}' has shape {:?}, architecture expects {shape:?}",
                        t.shape()
                    ),
                ));
            }
        }
        if self.len() != layout.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !layout.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::InvalidArgument(format!(
                "unexpected weights not used by the architecture: {extra:?}"
            )));
        }
        Ok(())
    }

    /// Every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Every tensor as a constant on `tape` (inference).
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (store, _) = Self::read_from(&mut r, path)?;
        Ok(store)
    }

    /// Header plus one record per tensor, in name order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a header and records until end of input or a zero-length name.
    ///
    /// Returns whether the zero-length sentinel was seen, in which case the
    /// reader is positioned just after it.
    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<(Self, bool)> {
        let bad = |detail: String| Error::format(path, detail);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected \"GACN\"")));
        }
        let version = read_u32(r).map_err(|_| bad("file too short for header".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let mut store = WeightStore::new();
        loop {
            let name_len = match read_u32_or_eof(r) {
                Ok(Some(n)) => n,
                Ok(None) => return Ok((store, false)),
                Err(e) => return Err(Error::io(path, e)),
            };
            if name_len == 0 {
                return Ok((store, true));
            }
            if name_len > MAX_NAME {
                return Err(bad(format!("record name length {name_len} is implausible")));
            }
            let truncated = |what: &str| bad(format!("truncated record ({what})"));
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name).map_err(|_| truncated("name"))?;
            let name =
                String::from_utf8(name).map_err(|_| bad("record name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(|_| truncated("rank"))?;
            if rank > MAX_RANK {
                return Err(bad(format!("'{name}' has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(read_u64(r).map_err(|_| truncated("dims"))? as usize);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("'{name}' dims overflow")))?;
            let mut bytes = Vec::new();
            r.by_ref()
                .take(4 * n as u64)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            if bytes.len() != 4 * n {
                return Err(truncated("payload"));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if store.tensors.contains_key(&name) {
                return Err(bad(format!("duplicate record '{name}'")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
    }
}

pub fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32_or_eof(r: &mut impl Read) -> std::io::Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            k => got += k,
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

/// Weights bound to a tape, looked up by name.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind explicit variables, e.g. to differentiate with respect to a subset.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<'t>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing weight '{name}'")))
    }

    /// Gradients for every bound weight; zeros where the loss does not depend on it.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}
