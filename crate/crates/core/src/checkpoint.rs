//! Binary checkpoint format.
//!
//! Layout: magic bytes `NASU`, format version u32, then length-prefixed
//! named sections. All integers little-endian, floats IEEE-754 at the
//! engine's scalar width (recorded in the header and enforced on load).
//! `load(save(state))` resumes bit-identically; any magic/version/width
//! mismatch is a hard error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::search::{EpochRecord, SearchConfig, SearchEngine};
use crate::search_space::Genotype;
use crate::supernet::{NetworkConfig, Supernet};
use crate::train::{TrainConfig, Trainer};

const MAGIC: &[u8; 4] = b"NASU";
const VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CheckpointMode {
    Search,
    Retrain,
}

/// Header fields common to both checkpoint modes.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub mode: CheckpointMode,
    pub epoch: u64,
    pub seed: u64,
    pub scalar_width: u8,
    pub engine_version: String,
}

// ---- byte-level encoding -------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    fn section(&mut self, name: &str, body: Vec<u8>) {
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(body.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(&body);
    }
}

fn push_u8(b: &mut Vec<u8>, v: u8) {
    b.push(v);
}
fn push_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn push_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn push_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn push_str(b: &mut Vec<u8>, s: &str) {
    push_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}
fn push_scalars<S: Scalar>(b: &mut Vec<u8>, xs: &[S]) {
    push_u64(b, xs.len() as u64);
    for &x in xs {
        let bits = x.to_bits_u64();
        b.extend_from_slice(&bits.to_le_bytes()[..S::WIDTH as usize]);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::data(format!("{}: truncated checkpoint", self.context)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::data(format!("{}: invalid utf8", self.context)))
    }
    fn scalars<S: Scalar>(&mut self) -> Result<Vec<S>> {
        let len = self.u64()? as usize;
        let width = S::WIDTH as usize;
        let raw = self.take(len * width)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                let mut bytes = [0u8; 8];
                bytes[..width].copy_from_slice(c);
                S::from_bits_u64(u64::from_le_bytes(bytes))
            })
            .collect())
    }
    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

fn split_sections<'a>(data: &'a [u8], context: &'a str) -> Result<Vec<(String, &'a [u8])>> {
    if data.len() < 8 || &data[0..4] != MAGIC {
        return Err(Error::data(format!("{context}: not a checkpoint (bad magic)")));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!(
            "{context}: checkpoint format version {version} does not match supported {VERSION}"
        )));
    }
    let mut r = Reader { data, pos: 8, context };
    let mut sections = Vec::new();
    while !r.done() {
        let name = r.str()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        sections.push((name, body));
    }
    Ok(sections)
}

fn find_section<'a>(sections: &[(String, &'a [u8])], name: &str, context: &str) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| *b)
        .ok_or_else(|| Error::data(format!("{context}: missing checkpoint section '{name}'")))
}

// ---- shared sections -------------------------------------------------------

fn encode_meta(mode: CheckpointMode, epoch: u64, seed: u64, width: u8) -> Vec<u8> {
    let mut b = Vec::new();
    push_u8(&mut b, if mode == CheckpointMode::Search { 0 } else { 1 });
    push_u64(&mut b, epoch);
    push_u64(&mut b, seed);
    push_u8(&mut b, width);
    push_str(&mut b, env!("CARGO_PKG_VERSION"));
    b
}

fn decode_meta(body: &[u8], context: &str) -> Result<CheckpointMeta> {
    let mut r = Reader { data: body, pos: 0, context };
    let mode = match r.u8()? {
        0 => CheckpointMode::Search,
        1 => CheckpointMode::Retrain,
        m => return Err(Error::data(format!("{context}: unknown checkpoint mode {m}"))),
    };
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let scalar_width = r.u8()?;
    let engine_version = r.str()?;
    Ok(CheckpointMeta { mode, epoch, seed, scalar_width, engine_version })
}

fn encode_params<S: Scalar>(store: &crate::params::ParamStore<S>) -> Vec<u8> {
    let mut b = Vec::new();
    push_u32(&mut b, store.len() as u32);
    for (_, p) in store.iter() {
        push_str(&mut b, &p.name);
        for dim in [p.shape.n, p.shape.c, p.shape.h, p.shape.w] {
            push_u32(&mut b, dim as u32);
        }
        push_scalars(&mut b, &p.data);
    }
    b
}

fn decode_params_into<S: Scalar>(
    body: &[u8],
    store: &mut crate::params::ParamStore<S>,
    context: &str,
) -> Result<()> {
    let mut r = Reader { data: body, pos: 0, context };
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::data(format!(
            "{context}: checkpoint has {count} parameters, network expects {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name = r.str()?;
        let _dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let data = r.scalars::<S>()?;
        let id = store
            .find(&name)
            .ok_or_else(|| Error::data(format!("{context}: unknown parameter '{name}'")))?;
        let p = store.get_mut(id);
        if p.data.len() != data.len() {
            return Err(Error::data(format!("{context}: size mismatch for '{name}'")));
        }
        p.data = data;
    }
    Ok(())
}

fn encode_history(history: &[EpochRecord]) -> Vec<u8> {
    let mut b = Vec::new();
    push_u32(&mut b, history.len() as u32);
    for rec in history {
        push_u64(&mut b, rec.epoch as u64);
        push_f64(&mut b, rec.train_loss);
        push_f64(&mut b, rec.pixel_accuracy);
        push_f64(&mut b, rec.miou);
        push_f64(&mut b, rec.dsc);
        push_f64(&mut b, rec.lr);
        push_u64(&mut b, rec.genotype_hash);
    }
    b
}

fn decode_history(body: &[u8], context: &str) -> Result<Vec<EpochRecord>> {
    let mut r = Reader { data: body, pos: 0, context };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(EpochRecord {
            epoch: r.u64()? as usize,
            train_loss: r.f64()?,
            pixel_accuracy: r.f64()?,
            miou: r.f64()?,
            dsc: r.f64()?,
            lr: r.f64()?,
            genotype_hash: r.u64()?,
        });
    }
    Ok(out)
}

fn encode_keyed_blobs<S: Scalar>(entries: Vec<(u64, Vec<&[S]>)>) -> Vec<u8> {
    let mut b = Vec::new();
    push_u32(&mut b, entries.len() as u32);
    for (key, blobs) in entries {
        push_u64(&mut b, key);
        push_u32(&mut b, blobs.len() as u32);
        for blob in blobs {
            push_scalars(&mut b, blob);
        }
    }
    b
}

fn decode_keyed_blobs<S: Scalar>(body: &[u8], context: &str) -> Result<Vec<(u64, Vec<Vec<S>>)>> {
    let mut r = Reader { data: body, pos: 0, context };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let key = r.u64()?;
        let n = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(n);
        for _ in 0..n {
            blobs.push(r.scalars::<S>()?);
        }
        out.push((key, blobs));
    }
    Ok(out)
}

// ---- search checkpoints ----------------------------------------------------

/// Serialize the full search state: alpha, weights, both optimizers,
/// history.
pub fn save_search<S: Scalar>(path: &Path, engine: &SearchEngine<S>) -> Result<()> {
    let mut w = Writer::new();
    w.section(
        "meta",
        encode_meta(CheckpointMode::Search, engine.epochs_done() as u64, engine.config.seed, S::WIDTH),
    );

    let mut alpha = Vec::new();
    for params in [&engine.net.alpha_down, &engine.net.alpha_up] {
        push_u32(&mut alpha, params.num_edges() as u32);
        for e in 0..params.num_edges() {
            push_scalars(&mut alpha, params.row(e));
        }
    }
    w.section("alpha", alpha);
    w.section("params", encode_params(&engine.net.store));

    let sgd: Vec<(u64, Vec<&[S]>)> = engine
        .weight_opt
        .state_keys()
        .map(|k| (k as u64, vec![engine.weight_opt.velocity(k).expect("listed key")]))
        .collect();
    w.section("opt.sgd", encode_keyed_blobs(sgd));

    let mut adam = Vec::new();
    push_u64(&mut adam, engine.arch_opt.t());
    let entries: Vec<(u64, Vec<&[S]>)> = engine
        .arch_opt
        .state_keys()
        .map(|k| {
            let (m, v) = engine.arch_opt.moments(k).expect("listed key");
            (k as u64, vec![m, v])
        })
        .collect();
    adam.extend(encode_keyed_blobs(entries));
    w.section("opt.adam", adam);

    w.section("history", encode_history(&engine.history));
    std::fs::write(path, w.buf)?;
    Ok(())
}

/// Rebuild a search engine from a checkpoint; the network/search
/// configuration must describe the same run that was saved.
pub fn load_search<S: Scalar>(
    path: &Path,
    net_config: NetworkConfig,
    config: SearchConfig,
) -> Result<SearchEngine<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let context = path.display().to_string();
    let sections = split_sections(&bytes, &context)?;

    let meta = decode_meta(find_section(&sections, "meta", &context)?, &context)?;
    if meta.mode != CheckpointMode::Search {
        return Err(Error::data(format!("{context}: not a search checkpoint")));
    }
    if meta.scalar_width != S::WIDTH {
        return Err(Error::data(format!(
            "{context}: checkpoint precision ({}-byte) does not match engine ({}-byte)",
            meta.scalar_width,
            S::WIDTH
        )));
    }
    if meta.seed != config.seed {
        return Err(Error::data(format!(
            "{context}: checkpoint seed {} does not match configured seed {}",
            meta.seed, config.seed
        )));
    }

    let net = Supernet::<S>::build(net_config, config.seed)?;
    let mut engine = SearchEngine::new(net, config)?;

    let alpha_body = find_section(&sections, "alpha", &context)?;
    let mut r = Reader { data: alpha_body, pos: 0, context: &context };
    for params in [&mut engine.net.alpha_down, &mut engine.net.alpha_up] {
        let rows = r.u32()? as usize;
        if rows != params.num_edges() {
            return Err(Error::data(format!("{context}: alpha row count mismatch")));
        }
        for e in 0..rows {
            let row = r.scalars::<S>()?;
            if row.len() != params.row(e).len() {
                return Err(Error::data(format!("{context}: alpha row {e} length mismatch")));
            }
            params.row_mut(e).copy_from_slice(&row);
        }
    }

    decode_params_into(find_section(&sections, "params", &context)?, &mut engine.net.store, &context)?;

    for (key, mut blobs) in decode_keyed_blobs::<S>(find_section(&sections, "opt.sgd", &context)?, &context)? {
        if blobs.len() != 1 {
            return Err(Error::data(format!("{context}: malformed sgd state")));
        }
        engine.weight_opt.set_velocity(key as usize, blobs.pop().expect("one blob"));
    }

    let adam_body = find_section(&sections, "opt.adam", &context)?;
    let mut r = Reader { data: adam_body, pos: 0, context: &context };
    let t = r.u64()?;
    engine.arch_opt.set_t(t);
    for (key, mut blobs) in decode_keyed_blobs::<S>(&adam_body[r.pos..], &context)? {
        if blobs.len() != 2 {
            return Err(Error::data(format!("{context}: malformed adam state")));
        }
        let v = blobs.pop().expect("two blobs");
        let m = blobs.pop().expect("two blobs");
        engine.arch_opt.set_moments(key as usize, m, v);
    }

    engine.history = decode_history(find_section(&sections, "history", &context)?, &context)?;
    Ok(engine)
}

// ---- retrain checkpoints -----------------------------------------------------

/// Serialize a retraining run: genotypes, weights, Adam state, history.
pub fn save_retrain<S: Scalar>(path: &Path, trainer: &Trainer<S>) -> Result<()> {
    let mut w = Writer::new();
    w.section(
        "meta",
        encode_meta(CheckpointMode::Retrain, trainer.epochs_done() as u64, trainer.config.seed, S::WIDTH),
    );
    let mut genos = Vec::new();
    push_str(&mut genos, &trainer.net.genotype_down.to_text());
    push_str(&mut genos, &trainer.net.genotype_up.to_text());
    w.section("genotypes", genos);
    w.section("params", encode_params(&trainer.net.store));

    let mut adam = Vec::new();
    push_u64(&mut adam, trainer.opt.t());
    let entries: Vec<(u64, Vec<&[S]>)> = trainer
        .opt
        .state_keys()
        .map(|k| {
            let (m, v) = trainer.opt.moments(k).expect("listed key");
            (k as u64, vec![m, v])
        })
        .collect();
    adam.extend(encode_keyed_blobs(entries));
    w.section("opt.adam", adam);
    w.section("history", encode_history(&trainer.history));
    std::fs::write(path, w.buf)?;
    Ok(())
}

/// Rebuild a trainer (network, optimizer, history) from a retrain
/// checkpoint.
pub fn load_retrain<S: Scalar>(
    path: &Path,
    net_config: NetworkConfig,
    config: TrainConfig,
) -> Result<Trainer<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let context = path.display().to_string();
    let sections = split_sections(&bytes, &context)?;

    let meta = decode_meta(find_section(&sections, "meta", &context)?, &context)?;
    if meta.mode != CheckpointMode::Retrain {
        return Err(Error::data(format!("{context}: not a retrain checkpoint")));
    }
    if meta.scalar_width != S::WIDTH {
        return Err(Error::data(format!(
            "{context}: checkpoint precision ({}-byte) does not match engine ({}-byte)",
            meta.scalar_width,
            S::WIDTH
        )));
    }
    if meta.seed != config.seed {
        return Err(Error::data(format!(
            "{context}: checkpoint seed {} does not match configured seed {}",
            meta.seed, config.seed
        )));
    }

    let genos_body = find_section(&sections, "genotypes", &context)?;
    let mut r = Reader { data: genos_body, pos: 0, context: &context };
    let gd = Genotype::parse(&r.str()?, &format!("{context} (down genotype)"))?;
    let gu = Genotype::parse(&r.str()?, &format!("{context} (up genotype)"))?;

    let mut trainer = Trainer::<S>::new(gd, gu, net_config, config)?;
    decode_params_into(find_section(&sections, "params", &context)?, &mut trainer.net.store, &context)?;

    let adam_body = find_section(&sections, "opt.adam", &context)?;
    let mut r = Reader { data: adam_body, pos: 0, context: &context };
    let t = r.u64()?;
    trainer.opt.set_t(t);
    for (key, mut blobs) in decode_keyed_blobs::<S>(&adam_body[r.pos..], &context)? {
        if blobs.len() != 2 {
            return Err(Error::data(format!("{context}: malformed adam state")));
        }
        let v = blobs.pop().expect("two blobs");
        let m = blobs.pop().expect("two blobs");
        trainer.opt.set_moments(key as usize, m, v);
    }
    trainer.history = decode_history(find_section(&sections, "history", &context)?, &context)?;
    Ok(trainer)
}

/// Read only the header of any checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let context = path.display().to_string();
    let sections = split_sections(&bytes, &context)?;
    decode_meta(find_section(&sections, "meta", &context)?, &context)
}

/// Read the genotypes out of a search checkpoint by deriving them from the
/// stored alpha (used by the derive command).
pub fn derive_from_search<S: Scalar>(
    path: &Path,
    net_config: NetworkConfig,
    config: SearchConfig,
) -> Result<(Genotype, Genotype)> {
    let engine = load_search::<S>(path, net_config, config)?;
    let (gd, gu) = engine.net.derive_genotypes();
    gd.validate()?;
    gu.validate()?;
    Ok((gd, gu))
}
