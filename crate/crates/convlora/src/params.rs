//! Named parameter storage, per-step graph binding, Adam, and checkpoints.
//!
//! Parameters live outside the tape. Each training step opens a fresh
//! [`Session`], binds the parameters it touches as leaves, runs forward and
//! backward, and reads the gradients back out keyed by parameter name.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

pub type ParamRef<F> = Rc<RefCell<Param<F>>>;

/// Registry of every parameter of a model, iterable in name order.
pub struct ParamSet<F> {
    params: Vec<ParamRef<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<F>,
        trainable: bool,
    ) -> ParamRef<F> {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data/shape mismatch"
        );
        debug_assert!(
            !self.params.iter().any(|p| p.borrow().name == name),
            "duplicate param name {name}"
        );
        let p = Rc::new(RefCell::new(Param {
            name,
            shape: shape.to_vec(),
            data,
            trainable,
        }));
        self.params.push(Rc::clone(&p));
        p
    }

    /// Parameters sorted by name; the canonical iteration order everywhere.
    pub fn sorted(&self) -> Vec<ParamRef<F>> {
        let mut v = self.params.clone();
        v.sort_by(|a, b| a.borrow().name.cmp(&b.borrow().name));
        v
    }

    pub fn get(&self, name: &str) -> Option<ParamRef<F>> {
        self.params.iter().find(|p| p.borrow().name == name).cloned()
    }

    /// (trainable, total) element counts.
    pub fn count(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut total = 0;
        for p in &self.params {
            let p = p.borrow();
            total += p.data.len();
            if p.trainable {
                trainable += p.data.len();
            }
        }
        (trainable, total)
    }

    /// Deterministic checksum of the non-trainable (frozen) parameters.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for p in self.sorted() {
            let p = p.borrow();
            if p.trainable {
                continue;
            }
            for v in &p.data {
                for b in v.to_f64_lossy().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Gradients of one step, keyed by parameter name.
#[derive(Default)]
pub struct GradStore<F> {
    grads: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One forward/backward pass: a fresh tape plus the parameter leaves bound
/// into it.
pub struct Session<F: Scalar> {
    pub graph: Graph<F>,
    binds: Vec<(ParamRef<F>, usize)>,
}

impl<F: Scalar> Default for Session<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Session<F> {
    pub fn new() -> Self {
        Session {
            graph: Graph::new(),
            binds: Vec::new(),
        }
    }

    /// Bind a parameter as a leaf; requires_grad follows its trainable flag.
    pub fn bind(&mut self, p: &ParamRef<F>) -> Result<Tensor<F>> {
        let (data, shape, trainable) = {
            let pb = p.borrow();
            (pb.data.clone(), pb.shape.clone(), pb.trainable)
        };
        let t = self.graph.leaf(data, &shape, trainable)?;
        self.binds.push((Rc::clone(p), t.id()));
        Ok(t)
    }

    pub fn constant(&self, data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
        self.graph.constant(data, shape)
    }

    /// Backward from a scalar loss; gradients of bound parameters are summed
    /// across multiple binds of the same parameter.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<GradStore<F>> {
        let grads = self.graph.backward(loss)?;
        let mut store = GradStore {
            grads: BTreeMap::new(),
        };
        for (p, id) in &self.binds {
            let pb = p.borrow();
            if !pb.trainable {
                continue;
            }
            let t = Tensor::alias(&self.graph, *id);
            if let Some(g) = grads.wrt(&t) {
                store
                    .grads
                    .entry(pb.name.clone())
                    .and_modify(|acc| {
                        for (a, &v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    })
                    .or_insert_with(|| g.to_vec());
            }
        }
        Ok(store)
    }
}

impl<F: Scalar> Tensor<F> {
    pub(crate) fn alias(graph: &Graph<F>, id: usize) -> Tensor<F> {
        Tensor {
            graph: graph.clone(),
            id,
        }
    }
}

/// Adam with classic L2 weight decay folded into the gradient.
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &ParamSet<F>, grads: &GradStore<F>) {
        self.t += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let bc1 = F::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let wd = F::c(self.weight_decay);
        for p in params.sorted() {
            let mut pb = p.borrow_mut();
            if !pb.trainable {
                continue;
            }
            let Some(g) = grads.get(&pb.name) else { continue };
            let n = pb.data.len();
            let (m, v) = self
                .state
                .entry(pb.name.clone())
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            for i in 0..n {
                let gi = g[i] + wd * pb.data[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pb.data[i] = pb.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Write a checkpoint: flat little-endian f64 binary plus a text manifest
/// (name, shape, trainable flag, offset), ordered by name.
pub fn save_checkpoint<F: Scalar>(params: &ParamSet<F>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bin = BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
    let mut manifest = BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    let mut offset = 0usize;
    for p in params.sorted() {
        let p = p.borrow();
        let shape = p
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(
            manifest,
            "{} shape={} trainable={} offset={} len={}",
            p.name,
            shape,
            p.trainable as u8,
            offset,
            p.data.len()
        )?;
        for v in &p.data {
            bin.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        offset += p.data.len();
    }
    Ok(())
}

/// Load a checkpoint into an existing parameter set; names and shapes must
/// match exactly.
pub fn load_checkpoint<F: Scalar>(params: &ParamSet<F>, dir: &Path) -> Result<()> {
    let manifest = BufReader::new(
        std::fs::File::open(dir.join("manifest.txt"))
            .map_err(|e| Error::Checkpoint(format!("missing manifest: {e}")))?,
    );
    let mut bin = BufReader::new(
        std::fs::File::open(dir.join("params.bin"))
            .map_err(|e| Error::Checkpoint(format!("missing params.bin: {e}")))?,
    );
    let mut raw = Vec::new();
    bin.read_to_end(&mut raw)?;
    for line in manifest.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Checkpoint(format!("bad manifest line: {line}")));
        }
        let name = fields[0];
        let shape: Vec<usize> = fields[1]
            .trim_start_matches("shape=")
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad shape in: {line}"))))
            .collect::<Result<_>>()?;
        let trainable = fields[2] == "trainable=1";
        let offset: usize = fields[3]
            .trim_start_matches("offset=")
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in: {line}")))?;
        let len: usize = fields[4]
            .trim_start_matches("len=")
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad len in: {line}")))?;
        let p = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let mut p = p.borrow_mut();
        if p.shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {shape:?}, model {:?}",
                p.shape
            )));
        }
        let byte_start = offset * 8;
        let byte_end = (offset + len) * 8;
        if byte_end > raw.len() {
            return Err(Error::Checkpoint(format!("params.bin too short for {name}")));
        }
        for (i, chunk) in raw[byte_start..byte_end].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            p.data[i] = F::c(v);
        }
        p.trainable = trainable;
    }
    Ok(())
}
