//! Minimal ONNX reader and CPU executor for convolutional feature extractors.
//!
//! Supports the operator subset used by AlexNet, SqueezeNet and VGG feature
//! stacks (convolution, activations, pooling, concatenation and elementwise
//! arithmetic) on `float32` NCHW tensors. Graphs are executed in file order,
//! which ONNX requires to be topological.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum OnnxError {
    #[error("cannot read model {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed protobuf: {0}")]
    Decode(String),
    #[error("unsupported model feature: {0}")]
    Unsupported(String),
    #[error("inference failed at node {node} ({op}): {reason}")]
    Inference { node: String, op: String, reason: String },
    #[error("graph has no value named {0}")]
    MissingValue(String),
}

// ---------------------------------------------------------------------------
// protobuf wire format

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

enum Field<'a> {
    Varint(u64),
    Fixed64(u64),
    Bytes(&'a [u8]),
    Fixed32(u32),
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn varint(&mut self) -> Result<u64, OnnxError> {
        let mut out = 0u64;
        for shift in (0..64).step_by(7) {
            let b = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| OnnxError::Decode("truncated varint".into()))?;
            self.pos += 1;
            out |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(OnnxError::Decode("varint longer than 10 bytes".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], OnnxError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| OnnxError::Decode("field runs past end of buffer".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn field(&mut self) -> Result<(u32, Field<'a>), OnnxError> {
        let key = self.varint()?;
        let number = (key >> 3) as u32;
        let value = match key & 7 {
            0 => Field::Varint(self.varint()?),
            1 => Field::Fixed64(u64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            2 => {
                let n = self.varint()? as usize;
                Field::Bytes(self.take(n)?)
            }
            5 => Field::Fixed32(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            wt => return Err(OnnxError::Decode(format!("unsupported wire type {wt} for field {number}"))),
        };
        Ok((number, value))
    }
}

fn string(b: &[u8]) -> Result<String, OnnxError> {
    String::from_utf8(b.to_vec()).map_err(|_| OnnxError::Decode("invalid UTF-8 string".into()))
}

fn push_ints(out: &mut Vec<i64>, f: Field<'_>) -> Result<(), OnnxError> {
    match f {
        Field::Varint(v) => out.push(v as i64),
        Field::Bytes(b) => {
            let mut r = Reader::new(b);
            while !r.done() {
                out.push(r.varint()? as i64);
            }
        }
        _ => return Err(OnnxError::Decode("bad encoding for repeated int64".into())),
    }
    Ok(())
}

fn push_floats(out: &mut Vec<f32>, f: Field<'_>) -> Result<(), OnnxError> {
    match f {
        Field::Fixed32(v) => out.push(f32::from_bits(v)),
        Field::Bytes(b) => {
            if b.len() % 4 != 0 {
                return Err(OnnxError::Decode("packed float length not a multiple of 4".into()));
            }
            out.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        _ => return Err(OnnxError::Decode("bad encoding for repeated float".into())),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// model structures

/// Dense `float32` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    fn nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }
}

const DT_FLOAT: i32 = 1;
const DT_INT32: i32 = 6;
const DT_INT64: i32 = 7;
const DT_DOUBLE: i32 = 11;

fn parse_tensor(buf: &[u8]) -> Result<(String, Tensor), OnnxError> {
    let mut r = Reader::new(buf);
    let mut dims = Vec::new();
    let mut dtype = 0;
    let mut name = String::new();
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    let mut doubles = Vec::new();
    let mut raw: Option<&[u8]> = None;
    while !r.done() {
        match r.field()? {
            (1, f) => push_ints(&mut dims, f)?,
            (2, Field::Varint(v)) => dtype = v as i32,
            (4, f) => push_floats(&mut floats, f)?,
            (5, f) | (7, f) => push_ints(&mut ints, f)?,
            (8, Field::Bytes(b)) => name = string(b)?,
            (9, Field::Bytes(b)) => raw = Some(b),
            (10, Field::Bytes(b)) => doubles.extend(
                b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32),
            ),
            (10, Field::Fixed64(v)) => doubles.push(f64::from_bits(v) as f32),
            (13, _) | (14, Field::Varint(1)) => {
                return Err(OnnxError::Unsupported(format!("tensor {name:?} uses external data")))
            }
            _ => {}
        }
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d.max(0) as usize).collect();
    let data: Vec<f32> = match (dtype, raw) {
        (DT_FLOAT, Some(b)) => b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        (DT_FLOAT, None) => floats,
        (DT_INT64, Some(b)) => b.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
        (DT_INT32, Some(b)) => b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
        (DT_INT64 | DT_INT32, None) => ints.iter().map(|&v| v as f32).collect(),
        (DT_DOUBLE, Some(b)) => b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
        (DT_DOUBLE, None) => doubles,
        (t, _) => return Err(OnnxError::Unsupported(format!("tensor {name:?} has data type {t}"))),
    };
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(OnnxError::Decode(format!(
            "tensor {name:?}: shape {shape:?} needs {expected} values, found {}",
            data.len()
        )));
    }
    Ok((name, Tensor::new(shape, data)))
}

#[derive(Debug, Clone)]
enum Attr {
    Float(f32),
    Int(i64),
    Str(String),
    Ints(Vec<i64>),
    Tensor(Tensor),
    Other,
}

fn parse_attr(buf: &[u8]) -> Result<(String, Attr), OnnxError> {
    let mut r = Reader::new(buf);
    let mut name = String::new();
    let mut kind = 0u64;
    let (mut f, mut i, mut s, mut t) = (None, None, None, None);
    let mut ints = Vec::new();
    while !r.done() {
        match r.field()? {
            (1, Field::Bytes(b)) => name = string(b)?,
            (2, Field::Fixed32(v)) => f = Some(f32::from_bits(v)),
            (3, Field::Varint(v)) => i = Some(v as i64),
            (4, Field::Bytes(b)) => s = Some(String::from_utf8_lossy(b).into_owned()),
            (5, Field::Bytes(b)) => t = Some(parse_tensor(b)?.1),
            (8, fl) => push_ints(&mut ints, fl)?,
            (20, Field::Varint(v)) => kind = v,
            _ => {}
        }
    }
    // AttributeType: FLOAT=1 INT=2 STRING=3 TENSOR=4 FLOATS=6 INTS=7
    let attr = match kind {
        1 => Attr::Float(f.unwrap_or(0.0)),
        2 => Attr::Int(i.unwrap_or(0)),
        3 => Attr::Str(s.unwrap_or_default()),
        4 => t.map(Attr::Tensor).unwrap_or(Attr::Other),
        7 => Attr::Ints(ints),
        // IR versions before the type field: infer from what was present
        0 => match (f, i, s, t) {
            (Some(v), ..) => Attr::Float(v),
            (_, Some(v), ..) => Attr::Int(v),
            (_, _, Some(v), _) => Attr::Str(v),
            (_, _, _, Some(v)) => Attr::Tensor(v),
            _ if !ints.is_empty() => Attr::Ints(ints),
            _ => Attr::Other,
        },
        _ => Attr::Other,
    };
    Ok((name, attr))
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: String,
    domain: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    attrs: HashMap<String, Attr>,
}

impl Node {
    fn ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(Attr::Ints(v)) => Some(v),
            _ => None,
        }
    }

    fn int(&self, key: &str, default: i64) -> i64 {
        match self.attrs.get(key) {
            Some(Attr::Int(v)) => *v,
            _ => default,
        }
    }

    fn float(&self, key: &str, default: f32) -> f32 {
        match self.attrs.get(key) {
            Some(Attr::Float(v)) => *v,
            _ => default,
        }
    }

    fn string(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key) {
            Some(Attr::Str(s)) => Some(s),
            _ => None,
        }
    }

    fn fail(&self, reason: impl Into<String>) -> OnnxError {
        OnnxError::Inference { node: self.name.clone(), op: self.op.clone(), reason: reason.into() }
    }
}

fn parse_node(buf: &[u8]) -> Result<Node, OnnxError> {
    let mut r = Reader::new(buf);
    let mut node = Node {
        name: String::new(),
        op: String::new(),
        domain: String::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        attrs: HashMap::new(),
    };
    while !r.done() {
        match r.field()? {
            (1, Field::Bytes(b)) => node.inputs.push(string(b)?),
            (2, Field::Bytes(b)) => node.outputs.push(string(b)?),
            (3, Field::Bytes(b)) => node.name = string(b)?,
            (4, Field::Bytes(b)) => node.op = string(b)?,
            (5, Field::Bytes(b)) => {
                let (k, v) = parse_attr(b)?;
                node.attrs.insert(k, v);
            }
            (7, Field::Bytes(b)) => node.domain = string(b)?,
            _ => {}
        }
    }
    if node.name.is_empty() {
        node.name = node.outputs.first().cloned().unwrap_or_default();
    }
    Ok(node)
}

fn value_info_name(buf: &[u8]) -> Result<String, OnnxError> {
    let mut r = Reader::new(buf);
    while !r.done() {
        if let (1, Field::Bytes(b)) = r.field()? {
            return string(b);
        }
    }
    Err(OnnxError::Decode("value info without a name".into()))
}

/// A parsed, immutable ONNX graph. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct OnnxModel {
    nodes: Vec<Node>,
    initializers: HashMap<String, Tensor>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

const SUPPORTED_OPS: &[&str] = &[
    "Conv", "Relu", "LeakyRelu", "MaxPool", "AveragePool", "Concat", "Identity", "Dropout",
    "Constant", "Add", "Sub", "Mul", "Div", "Clip",
];

impl OnnxModel {
    pub fn load(path: &Path) -> Result<Self, OnnxError> {
        let bytes = std::fs::read(path)
            .map_err(|e| OnnxError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OnnxError> {
        let mut r = Reader::new(bytes);
        let mut graph = None;
        while !r.done() {
            if let (7, Field::Bytes(b)) = r.field()? {
                graph = Some(b);
            }
        }
        let graph = graph.ok_or_else(|| OnnxError::Decode("model has no graph".into()))?;

        let mut nodes = Vec::new();
        let mut initializers = HashMap::new();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut r = Reader::new(graph);
        while !r.done() {
            match r.field()? {
                (1, Field::Bytes(b)) => nodes.push(parse_node(b)?),
                (5, Field::Bytes(b)) => {
                    let (name, t) = parse_tensor(b)?;
                    initializers.insert(name, t);
                }
                (11, Field::Bytes(b)) => inputs.push(value_info_name(b)?),
                (12, Field::Bytes(b)) => outputs.push(value_info_name(b)?),
                _ => {}
            }
        }
        inputs.retain(|n| !initializers.contains_key(n));
        for n in &nodes {
            if !(n.domain.is_empty() || n.domain == "ai.onnx") || !SUPPORTED_OPS.contains(&n.op.as_str()) {
                return Err(OnnxError::Unsupported(format!("operator {}:{} ({})", n.domain, n.op, n.name)));
            }
        }
        if inputs.len() != 1 {
            return Err(OnnxError::Unsupported(format!("expected one graph input, found {inputs:?}")));
        }
        Ok(Self { nodes, initializers, inputs, outputs })
    }

    pub fn input_name(&self) -> &str {
        &self.inputs[0]
    }

    pub fn output_names(&self) -> &[String] {
        &self.outputs
    }

    /// Whether `name` is produced by some node or is a graph input.
    pub fn has_value(&self, name: &str) -> bool {
        self.inputs.iter().any(|n| n == name) || self.nodes.iter().any(|n| n.outputs.iter().any(|o| o == name))
    }

    /// Runs the graph on `input` and returns the requested intermediate or
    /// output values, in the order asked.
    pub fn run(&self, input: Tensor, wanted: &[String]) -> Result<Vec<Tensor>, OnnxError> {
        for w in wanted {
            if !self.has_value(w) {
                return Err(OnnxError::MissingValue(w.clone()));
            }
        }
        // last node index reading each value, to free memory early
        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                last_use.insert(inp.as_str(), i);
            }
        }
        let mut values: HashMap<String, Tensor> = HashMap::new();
        let mut collected: HashMap<String, Tensor> = HashMap::new();
        if wanted.iter().any(|w| w == &self.inputs[0]) {
            collected.insert(self.inputs[0].clone(), input.clone());
        }
        values.insert(self.inputs[0].clone(), input);

        for (i, node) in self.nodes.iter().enumerate() {
            if collected.len() == wanted.len() {
                break;
            }
            let outs = {
                let get = |k: usize| -> Result<Option<&Tensor>, OnnxError> {
                    match node.inputs.get(k).map(String::as_str) {
                        None | Some("") => Ok(None),
                        Some(name) => values
                            .get(name)
                            .or_else(|| self.initializers.get(name))
                            .map(Some)
                            .ok_or_else(|| OnnxError::MissingValue(name.to_string())),
                    }
                };
                execute(node, &get)?
            };
            for (name, t) in node.outputs.iter().zip(outs) {
                if wanted.contains(name) {
                    collected.insert(name.clone(), t.clone());
                }
                values.insert(name.clone(), t);
            }
            values.retain(|k, _| last_use.get(k.as_str()).is_some_and(|&l| l > i));
        }
        wanted
            .iter()
            .map(|w| collected.remove(w).ok_or_else(|| OnnxError::MissingValue(w.clone())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// operators

type Getter<'a> = dyn Fn(usize) -> Result<Option<&'a Tensor>, OnnxError> + 'a;

fn execute<'a>(node: &Node, get: &Getter<'a>) -> Result<Vec<Tensor>, OnnxError> {
    let req = |k: usize| -> Result<&'a Tensor, OnnxError> {
        get(k)?.ok_or_else(|| node.fail(format!("missing input {k}")))
    };
    let out = match node.op.as_str() {
        "Conv" => conv(node, req(0)?, req(1)?, get(2)?)?,
        "Relu" => map(req(0)?, |v| v.max(0.0)),
        "LeakyRelu" => {
            let alpha = node.float("alpha", 0.01);
            map(req(0)?, |v| if v < 0.0 { alpha * v } else { v })
        }
        "Clip" => {
            let lo = scalar_input(get(1)?).unwrap_or(node.float("min", f32::NEG_INFINITY));
            let hi = scalar_input(get(2)?).unwrap_or(node.float("max", f32::INFINITY));
            map(req(0)?, |v| v.clamp(lo, hi))
        }
        "MaxPool" => pool(node, req(0)?, PoolKind::Max)?,
        "AveragePool" => pool(node, req(0)?, PoolKind::Avg)?,
        "Concat" => {
            let parts: Vec<&Tensor> = (0..node.inputs.len()).map(req).collect::<Result<_, _>>()?;
            concat(node, &parts)?
        }
        "Identity" | "Dropout" => req(0)?.clone(),
        "Constant" => match node.attrs.get("value") {
            Some(Attr::Tensor(t)) => t.clone(),
            _ => return Err(node.fail("only tensor-valued Constant is supported")),
        },
        "Add" => broadcast(node, req(0)?, req(1)?, |a, b| a + b)?,
        "Sub" => broadcast(node, req(0)?, req(1)?, |a, b| a - b)?,
        "Mul" => broadcast(node, req(0)?, req(1)?, |a, b| a * b)?,
        "Div" => broadcast(node, req(0)?, req(1)?, |a, b| a / b)?,
        other => return Err(node.fail(format!("unsupported operator {other}"))),
    };
    Ok(vec![out])
}

fn scalar_input(t: Option<&Tensor>) -> Option<f32> {
    t.and_then(|t| t.data.first().copied())
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32 + Sync + Send) -> Tensor {
    let mut data = t.data.clone();
    par::for_each_chunk_mut(&mut data, 1 << 16, |_, c| c.iter_mut().for_each(|v| *v = f(*v)));
    Tensor::new(t.shape.clone(), data)
}

fn attr_pair(node: &Node, key: &str, default: usize) -> Result<[usize; 2], OnnxError> {
    match node.ints(key) {
        None => Ok([default; 2]),
        Some([a, b]) if *a >= 0 && *b >= 0 => Ok([*a as usize, *b as usize]),
        Some(v) => Err(node.fail(format!("{key} must hold two non-negative values, got {v:?}"))),
    }
}

/// `[top, left, bottom, right]`
fn pads(node: &Node) -> Result<[usize; 4], OnnxError> {
    match node.string("auto_pad") {
        None | Some("NOTSET") | Some("VALID") => {}
        Some(other) => return Err(node.fail(format!("auto_pad={other} is not supported"))),
    }
    match node.ints("pads") {
        None => Ok([0; 4]),
        Some([t, l, b, r]) if [t, l, b, r].iter().all(|v| **v >= 0) => {
            Ok([*t as usize, *l as usize, *b as usize, *r as usize])
        }
        Some(v) => Err(node.fail(format!("pads must hold four non-negative values, got {v:?}"))),
    }
}

fn conv(node: &Node, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, OnnxError> {
    let (n, c, h, wd) = x.nchw().ok_or_else(|| node.fail("input must be NCHW"))?;
    let (m, cg, kh, kw) = w.nchw().ok_or_else(|| node.fail("weights must be 4-D"))?;
    let group = node.int("group", 1).max(1) as usize;
    if c != cg * group || m % group != 0 {
        return Err(node.fail(format!("channel mismatch: input {c}, weights {:?}, group {group}", w.shape)));
    }
    if let Some(k) = node.ints("kernel_shape") {
        if k != [kh as i64, kw as i64] {
            return Err(node.fail("kernel_shape disagrees with weights"));
        }
    }
    if let Some(b) = bias {
        if b.data.len() != m {
            return Err(node.fail("bias length differs from output channels"));
        }
    }
    let [sh, sw] = attr_pair(node, "strides", 1)?;
    let [dh, dw] = attr_pair(node, "dilations", 1)?;
    let [pt, pl, pb, pr] = pads(node)?;
    let eff_h = (kh - 1) * dh + 1;
    let eff_w = (kw - 1) * dw + 1;
    if h + pt + pb < eff_h || wd + pl + pr < eff_w || sh == 0 || sw == 0 {
        return Err(node.fail("input smaller than the kernel"));
    }
    let oh = (h + pt + pb - eff_h) / sh + 1;
    let ow = (wd + pl + pr - eff_w) / sw + 1;
    let mg = m / group;
    let k = cg * kh * kw;
    let plane = oh * ow;

    // output columns are processed in blocks so the im2col buffer stays small
    let block = (1usize << 21).div_ceil(k).clamp(64, plane.max(64));
    let blocks: Vec<(usize, usize, usize, usize)> = (0..n)
        .flat_map(|b| (0..group).flat_map(move |g| (0..plane).step_by(block).map(move |s| (b, g, s, (s + block).min(plane)))))
        .collect();

    let results = par::map(&blocks, |&(b, g, start, end)| {
        let cols = end - start;
        let mut col = vec![0f32; k * cols];
        for ci in 0..cg {
            let chan = &x.data[((b * c) + g * cg + ci) * h * wd..][..h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut col[((ci * kh + ky) * kw + kx) * cols..][..cols];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let p = start + j;
                        let (oy, ox) = (p / ow, p % ow);
                        let iy = (oy * sh + ky * dh) as isize - pt as isize;
                        let ix = (ox * sw + kx * dw) as isize - pl as isize;
                        *slot = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            chan[iy as usize * wd + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        let wg = &w.data[g * mg * k..][..mg * k];
        let mut out = vec![0f32; mg * cols];
        // SAFETY: slices sized mg*k, k*cols and mg*cols with the row-major
        // strides passed below.
        unsafe {
            matrixmultiply::sgemm(
                mg, k, cols, 1.0,
                wg.as_ptr(), k as isize, 1,
                col.as_ptr(), cols as isize, 1,
                0.0,
                out.as_mut_ptr(), cols as isize, 1,
            );
        }
        out
    });

    let mut data = vec![0f32; n * m * plane];
    for (&(b, g, start, end), block_out) in blocks.iter().zip(results) {
        let cols = end - start;
        for mi in 0..mg {
            let oc = g * mg + mi;
            let bias_v = bias.map_or(0.0, |t| t.data[oc]);
            let dst = &mut data[(b * m + oc) * plane + start..][..cols];
            for (d, s) in dst.iter_mut().zip(&block_out[mi * cols..(mi + 1) * cols]) {
                *d = s + bias_v;
            }
        }
    }
    Ok(Tensor::new(vec![n, m, oh, ow], data))
}

#[derive(Clone, Copy)]
enum PoolKind {
    Max,
    Avg,
}

fn pool(node: &Node, x: &Tensor, kind: PoolKind) -> Result<Tensor, OnnxError> {
    let (n, c, h, w) = x.nchw().ok_or_else(|| node.fail("input must be NCHW"))?;
    let [kh, kw] = match node.ints("kernel_shape") {
        Some([a, b]) if *a > 0 && *b > 0 => [*a as usize, *b as usize],
        _ => return Err(node.fail("kernel_shape must hold two positive values")),
    };
    let [sh, sw] = attr_pair(node, "strides", 1)?;
    if attr_pair(node, "dilations", 1)? != [1, 1] {
        return Err(node.fail("dilated pooling is not supported"));
    }
    let [pt, pl, pb, pr] = pads(node)?;
    let ceil = node.int("ceil_mode", 0) != 0;
    let include_pad = node.int("count_include_pad", 0) != 0;
    let out_dim = |size: usize, k: usize, s: usize, lo: usize, hi: usize| -> Result<usize, OnnxError> {
        let span = (size + lo + hi)
            .checked_sub(k)
            .ok_or_else(|| node.fail("input smaller than the pooling window"))?;
        let mut o = if ceil { span.div_ceil(s) + 1 } else { span / s + 1 };
        // a window may not start inside the trailing padding
        if ceil && (o - 1) * s >= size + lo {
            o -= 1;
        }
        Ok(o)
    };
    let oh = out_dim(h, kh, sh, pt, pb)?;
    let ow = out_dim(w, kw, sw, pl, pr)?;

    let mut data = vec![0f32; n * c * oh * ow];
    par::for_each_chunk_mut(&mut data, oh * ow, |plane_idx, out| {
        let src = &x.data[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * sh) as isize - pt as isize;
                let x0 = (ox * sw) as isize - pl as isize;
                let (mut acc, mut count) = match kind {
                    PoolKind::Max => (f32::NEG_INFINITY, 0usize),
                    PoolKind::Avg => (0.0, 0usize),
                };
                let mut padded = 0usize;
                for ky in 0..kh as isize {
                    for kx in 0..kw as isize {
                        let (iy, ix) = (y0 + ky, x0 + kx);
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                            // only positions inside the explicit padding count
                            if iy < (h + pb) as isize && ix < (w + pr) as isize {
                                padded += 1;
                            }
                            continue;
                        }
                        let v = src[iy as usize * w + ix as usize];
                        match kind {
                            PoolKind::Max => acc = acc.max(v),
                            PoolKind::Avg => acc += v,
                        }
                        count += 1;
                    }
                }
                out[oy * ow + ox] = match kind {
                    PoolKind::Max => acc,
                    PoolKind::Avg => {
                        let denom = if include_pad { count + padded } else { count };
                        acc / denom.max(1) as f32
                    }
                };
            }
        }
    });
    Ok(Tensor::new(vec![n, c, oh, ow], data))
}

fn concat(node: &Node, parts: &[&Tensor]) -> Result<Tensor, OnnxError> {
    let first = parts.first().ok_or_else(|| node.fail("no inputs"))?;
    let rank = first.shape.len() as i64;
    let mut axis = node.int("axis", 1);
    if axis < 0 {
        axis += rank;
    }
    if !(0..rank).contains(&axis) {
        return Err(node.fail(format!("axis {axis} out of range")));
    }
    let axis = axis as usize;
    for p in parts {
        if p.shape.len() != first.shape.len()
            || p.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(node.fail("concat inputs differ outside the axis"));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor::new(shape, data))
}

fn broadcast(node: &Node, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, OnnxError> {
    let rank = a.shape.len().max(b.shape.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (sa, sb) = (pad(&a.shape), pad(&b.shape));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in sa.iter().zip(&sb) {
        shape.push(match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(node.fail(format!("cannot broadcast {:?} with {:?}", a.shape, b.shape))),
        });
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (ta, tb) = (strides(&sa), strides(&sb));
    let total: usize = shape.iter().product();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let ia: usize = idx.iter().zip(&ta).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&tb).map(|(i, s)| i * s).sum();
        data.push(f(a.data[ia], b.data[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Hand-encodes small ONNX graphs for tests.
    pub(crate) mod enc {
        pub fn varint(mut v: u64, out: &mut Vec<u8>) {
            loop {
                let b = (v & 0x7f) as u8;
                v >>= 7;
                if v == 0 {
                    out.push(b);
                    return;
                }
                out.push(b | 0x80);
            }
        }
        pub fn bytes(field: u32, b: &[u8], out: &mut Vec<u8>) {
            varint(((field as u64) << 3) | 2, out);
            varint(b.len() as u64, out);
            out.extend_from_slice(b);
        }
        pub fn int(field: u32, v: i64, out: &mut Vec<u8>) {
            varint((field as u64) << 3, out);
            varint(v as u64, out);
        }
        pub fn tensor(name: &str, dims: &[i64], data: &[f32]) -> Vec<u8> {
            let mut t = Vec::new();
            for &d in dims {
                int(1, d, &mut t);
            }
            int(2, 1, &mut t);
            bytes(8, name.as_bytes(), &mut t);
            let raw: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes(9, &raw, &mut t);
            t
        }
        pub fn attr_ints(name: &str, v: &[i64]) -> Vec<u8> {
            let mut a = Vec::new();
            bytes(1, name.as_bytes(), &mut a);
            let mut packed = Vec::new();
            for &x in v {
                varint(x as u64, &mut packed);
            }
            bytes(8, &packed, &mut a);
            int(20, 7, &mut a);
            a
        }
        pub fn attr_int(name: &str, v: i64) -> Vec<u8> {
            let mut a = Vec::new();
            bytes(1, name.as_bytes(), &mut a);
            int(3, v, &mut a);
            int(20, 2, &mut a);
            a
        }
        pub fn node(op: &str, inputs: &[&str], outputs: &[&str], attrs: &[Vec<u8>]) -> Vec<u8> {
            let mut n = Vec::new();
            for i in inputs {
                bytes(1, i.as_bytes(), &mut n);
            }
            for o in outputs {
                bytes(2, o.as_bytes(), &mut n);
            }
            bytes(4, op.as_bytes(), &mut n);
            for a in attrs {
                bytes(5, a, &mut n);
            }
            n
        }
        pub fn value_info(name: &str) -> Vec<u8> {
            let mut v = Vec::new();
            bytes(1, name.as_bytes(), &mut v);
            v
        }
        pub fn model(nodes: &[Vec<u8>], inits: &[Vec<u8>], input: &str, outputs: &[&str]) -> Vec<u8> {
            let mut g = Vec::new();
            for n in nodes {
                bytes(1, n, &mut g);
            }
            for t in inits {
                bytes(5, t, &mut g);
            }
            bytes(11, &value_info(input), &mut g);
            for o in outputs {
                bytes(12, &value_info(o), &mut g);
            }
            let mut m = Vec::new();
            int(1, 8, &mut m);
            bytes(7, &g, &mut m);
            m
        }
    }

    /// Direct convolution used as the reference for the im2col path.
    fn conv_direct(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
        let (_, c, h, wd) = x.nchw().unwrap();
        let (m, _, kh, kw) = w.nchw().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0f32; m * oh * ow];
        for o in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data[(ci * h + iy as usize) * wd + ix as usize] as f64
                                        * w.data[((o * c + ci) * kh + ky) * kw + kx] as f64;
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        Tensor::new(vec![1, m, oh, ow], out)
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 2001) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = Tensor::new(vec![1, 3, 17, 13], pseudo(3 * 17 * 13, 1));
        let w = Tensor::new(vec![5, 3, 3, 3], pseudo(5 * 27, 2));
        let b = pseudo(5, 3);
        let bytes = enc::model(
            &[enc::node(
                "Conv",
                &["x", "w", "b"],
                &["y"],
                &[enc::attr_ints("strides", &[2, 2]), enc::attr_ints("pads", &[1, 1, 1, 1])],
            )],
            &[enc::tensor("w", &[5, 3, 3, 3], &w.data), enc::tensor("b", &[5], &b)],
            "x",
            &["y"],
        );
        let model = OnnxModel::from_bytes(&bytes).unwrap();
        let got = model.run(x.clone(), &["y".to_string()]).unwrap().remove(0);
        let want = conv_direct(&x, &w, &b, 2, 1);
        assert_eq!(got.shape, want.shape);
        for (g, e) in got.data.iter().zip(&want.data) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn grouped_conv_splits_channels() {
        // group=2, identity 1x1 kernels swap nothing: output equals input
        let x = Tensor::new(vec![1, 2, 3, 3], pseudo(18, 9));
        let w = [1.0f32, 1.0];
        let bytes = enc::model(
            &[enc::node("Conv", &["x", "w"], &["y"], &[enc::attr_int("group", 2)])],
            &[enc::tensor("w", &[2, 1, 1, 1], &w)],
            "x",
            &["y"],
        );
        let y = OnnxModel::from_bytes(&bytes).unwrap().run(x.clone(), &["y".into()]).unwrap().remove(0);
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_ceil_mode_matches_torch_shape_rule() {
        // 13 -> kernel 3 stride 2 ceil -> 6 (torch); floor would give 6 as well,
        // 14 -> ceil 7, floor 6
        let x = Tensor::new(vec![1, 1, 14, 14], (0..196).map(|v| v as f32).collect());
        let bytes = enc::model(
            &[enc::node(
                "MaxPool",
                &["x"],
                &["y"],
                &[enc::attr_ints("kernel_shape", &[3, 3]), enc::attr_ints("strides", &[2, 2]), enc::attr_int("ceil_mode", 1)],
            )],
            &[],
            "x",
            &["y"],
        );
        let y = OnnxModel::from_bytes(&bytes).unwrap().run(x, &["y".into()]).unwrap().remove(0);
        assert_eq!(y.shape, vec![1, 1, 7, 7]);
        // last window covers rows/cols 12..13 only
        assert_eq!(y.data[48], 195.0);
        assert_eq!(y.data[0], 2.0 * 14.0 + 2.0);
    }

    #[test]
    fn relu_concat_and_taps() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 2.0]);
        let bytes = enc::model(
            &[
                enc::node("Relu", &["x"], &["r"], &[]),
                enc::node("Concat", &["r", "x"], &["c"], &[enc::attr_int("axis", 1)]),
            ],
            &[],
            "x",
            &["c"],
        );
        let model = OnnxModel::from_bytes(&bytes).unwrap();
        let out = model.run(x, &["r".into(), "c".into()]).unwrap();
        assert_eq!(out[0].data, vec![0.0, 2.0]);
        assert_eq!(out[1].shape, vec![1, 2, 1, 2]);
        assert_eq!(out[1].data, vec![0.0, 2.0, -1.0, 2.0]);
        assert!(matches!(
            model.run(Tensor::new(vec![1, 1, 1, 1], vec![0.0]), &["nope".into()]),
            Err(OnnxError::MissingValue(_))
        ));
    }

    #[test]
    fn broadcasting_arithmetic() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = enc::model(
            &[enc::node("Sub", &["x", "s"], &["a"], &[]), enc::node("Div", &["a", "d"], &["y"], &[])],
            &[enc::tensor("s", &[1, 2, 1, 1], &[1.0, 3.0]), enc::tensor("d", &[], &[2.0])],
            "x",
            &["y"],
        );
        let y = OnnxModel::from_bytes(&bytes).unwrap().run(x, &["y".into()]).unwrap().remove(0);
        assert_eq!(y.data, vec![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn rejects_unknown_operators_and_garbage() {
        let bytes = enc::model(&[enc::node("Softmax", &["x"], &["y"], &[])], &[], "x", &["y"]);
        assert!(matches!(OnnxModel::from_bytes(&bytes), Err(OnnxError::Unsupported(_))));
        assert!(OnnxModel::from_bytes(&[0x3a, 0xff]).is_err());
        assert!(OnnxModel::from_bytes(&[]).is_err());
    }
}
