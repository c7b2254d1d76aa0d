//! Physical KV storage: a full-precision pool, a latent pool, logical to
//! physical slot tables, and the per-request sink / recent / compressed tiers.
//!
//! Every compressed layer keeps its first `n_sink` tokens and its newest
//! `n_recent` tokens in full slots. Older tokens live in the latent pool as
//! compressed residuals. Tokens whose index is a multiple of the stride also
//! get a dedicated full slot in the reference region when they are appended;
//! that slot backs the layer's reference set and is what a view reads when the
//! token is selected, so references are never reconstructed. Filter layers
//! keep every token in full slots.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::controller::keep_ratio;
use crate::error::{Error, Result};
use crate::quant::{dequantize_token, quantize_token, quantized_bytes, QuantizedLatent};
use crate::reference::ReferenceSet;
use crate::tensor::{Matrix, Real};

pub type RequestId = u64;

/// Lowest-id-first allocator over `0..capacity`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotAllocator {
    capacity: usize,
    free: BTreeSet<usize>,
}

impl SlotAllocator {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, free: (0..capacity).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn live_count(&self) -> usize {
        self.capacity - self.free.len()
    }

    pub fn is_live(&self, slot: usize) -> bool {
        slot < self.capacity && !self.free.contains(&slot)
    }

    pub fn live_slots(&self) -> Vec<usize> {
        (0..self.capacity).filter(|s| !self.free.contains(s)).collect()
    }

    /// The `n` smallest free ids.
    pub fn alloc(&mut self, n: usize) -> Result<Vec<usize>> {
        if n > self.free.len() {
            return Err(Error::PoolExhausted(format!(
                "requested {n} slots with {} of {} free",
                self.free.len(),
                self.capacity
            )));
        }
        Ok((0..n).map(|_| self.free.pop_first().expect("checked")).collect())
    }

    pub fn alloc_one(&mut self) -> Result<usize> {
        Ok(self.alloc(1)?[0])
    }

    /// Takes a specific free id.
    pub fn claim(&mut self, slot: usize) -> Result<()> {
        if !self.free.remove(&slot) {
            return Err(Error::Lifecycle(format!("slot {slot} is not free")));
        }
        Ok(())
    }

    /// Returns slots to the free list; nothing changes if any slot is
    /// already free or listed twice.
    pub fn free(&mut self, slots: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &s in slots {
            if !self.is_live(s) || !seen.insert(s) {
                return Err(Error::Lifecycle(format!("slot {s} is not live")));
            }
        }
        self.free.extend(slots);
        Ok(())
    }
}

/// Full-precision KV slots. Each slot holds `segments` rows of `width` reals
/// (one segment per layer when the slot table is shared across layers).
#[derive(Debug, Clone)]
pub struct FullPool<T> {
    alloc: SlotAllocator,
    width: usize,
    segments: usize,
    data: Vec<T>,
}

impl<T: Real> FullPool<T> {
    pub fn new(capacity: usize, width: usize, segments: usize) -> Self {
        Self { alloc: SlotAllocator::new(capacity), width, segments, data: vec![T::zero(); capacity * width * segments] }
    }

    pub fn allocator(&self) -> &SlotAllocator {
        &self.alloc
    }

    pub fn alloc(&mut self, n: usize) -> Result<Vec<usize>> {
        self.alloc.alloc(n)
    }

    pub fn free(&mut self, slots: &[usize]) -> Result<()> {
        self.alloc.free(slots)
    }

    pub fn slot_bytes(&self) -> usize {
        self.width * self.segments * T::BYTES
    }

    fn offset(&self, slot: usize, segment: usize) -> Result<usize> {
        if !self.alloc.is_live(slot) {
            return Err(Error::Lifecycle(format!("full slot {slot} is not live")));
        }
        Ok((slot * self.segments + segment) * self.width)
    }

    pub fn write(&mut self, slot: usize, segment: usize, kv: &[T]) -> Result<()> {
        if kv.len() != self.width {
            return Err(Error::Shape(format!("row of {} in a pool of width {}", kv.len(), self.width)));
        }
        let o = self.offset(slot, segment)?;
        self.data[o..o + self.width].copy_from_slice(kv);
        Ok(())
    }

    pub fn read(&self, slot: usize, segment: usize) -> Result<&[T]> {
        let o = self.offset(slot, segment)?;
        Ok(&self.data[o..o + self.width])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    #[default]
    Raw,
    Quantized,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentRecord<T> {
    Raw(Vec<T>),
    Quantized(QuantizedLatent),
}

#[derive(Debug, Clone)]
pub struct LatentPool<T> {
    alloc: SlotAllocator,
    latent_dim: usize,
    mode: LatentMode,
    data: Vec<Option<LatentRecord<T>>>,
}

impl<T: Real> LatentPool<T> {
    pub fn new(capacity: usize, latent_dim: usize, mode: LatentMode) -> Self {
        Self { alloc: SlotAllocator::new(capacity), latent_dim, mode, data: vec![None; capacity] }
    }

    pub fn allocator(&self) -> &SlotAllocator {
        &self.alloc
    }

    pub fn mode(&self) -> LatentMode {
        self.mode
    }

    pub fn slot_bytes(&self) -> usize {
        match self.mode {
            LatentMode::Raw => self.latent_dim * T::BYTES,
            LatentMode::Quantized => quantized_bytes(self.latent_dim),
        }
    }

    pub fn alloc(&mut self, n: usize) -> Result<Vec<usize>> {
        self.alloc.alloc(n)
    }

    pub fn free(&mut self, slots: &[usize]) -> Result<()> {
        self.alloc.free(slots)?;
        for &s in slots {
            self.data[s] = None;
        }
        Ok(())
    }

    /// Stores a latent code, quantizing it in quantized mode.
    pub fn write(&mut self, slot: usize, z: &[T]) -> Result<()> {
        if !self.alloc.is_live(slot) {
            return Err(Error::Lifecycle(format!("latent slot {slot} is not live")));
        }
        if z.len() != self.latent_dim {
            return Err(Error::Shape(format!("latent of {} in a pool of width {}", z.len(), self.latent_dim)));
        }
        self.data[slot] = Some(match self.mode {
            LatentMode::Raw => LatentRecord::Raw(z.to_vec()),
            LatentMode::Quantized => LatentRecord::Quantized(quantize_token(z)),
        });
        Ok(())
    }

    pub fn record(&self, slot: usize) -> Result<&LatentRecord<T>> {
        if !self.alloc.is_live(slot) {
            return Err(Error::Lifecycle(format!("latent slot {slot} is not live")));
        }
        self.data[slot].as_ref().ok_or_else(|| Error::Lifecycle(format!("latent slot {slot} was never written")))
    }

    /// The stored code, dequantized in quantized mode.
    pub fn read(&self, slot: usize) -> Result<Vec<T>> {
        match self.record(slot)? {
            LatentRecord::Raw(z) => Ok(z.clone()),
            LatentRecord::Quantized(q) => dequantize_token(q, self.latent_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Full,
    Latent,
    Temp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub tier: Tier,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotMapVariant {
    #[default]
    PerLayer,
    Global,
}

/// Logical position to physical slot, per request.
#[derive(Debug, Clone)]
pub struct SlotMap {
    variant: SlotMapVariant,
    n_layers: usize,
    tables: Vec<BTreeMap<RequestId, Vec<SlotRef>>>,
}

impl SlotMap {
    pub fn new(variant: SlotMapVariant, n_layers: usize) -> Self {
        let n = match variant {
            SlotMapVariant::PerLayer => n_layers,
            SlotMapVariant::Global => 1,
        };
        Self { variant, n_layers, tables: vec![BTreeMap::new(); n] }
    }

    pub fn variant(&self) -> SlotMapVariant {
        self.variant
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    fn table(&self, layer: usize) -> usize {
        match self.variant {
            SlotMapVariant::PerLayer => layer,
            SlotMapVariant::Global => 0,
        }
    }

    pub fn get(&self, req: RequestId, layer: usize, pos: usize) -> Option<SlotRef> {
        self.tables[self.table(layer)].get(&req).and_then(|t| t.get(pos).copied())
    }

    pub fn len(&self, req: RequestId, layer: usize) -> usize {
        self.tables[self.table(layer)].get(&req).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(BTreeMap::is_empty)
    }

    pub fn entries(&self, req: RequestId, layer: usize) -> &[SlotRef] {
        self.tables[self.table(layer)].get(&req).map_or(&[], Vec::as_slice)
    }

    /// Maps `pos` (existing, or exactly one past the end) to `slot`. In the
    /// global variant a position can only ever point at one full slot.
    pub fn set(&mut self, req: RequestId, layer: usize, pos: usize, slot: SlotRef) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Index(format!("layer {layer} of {}", self.n_layers)));
        }
        let global = self.variant == SlotMapVariant::Global;
        let ti = self.table(layer);
        let t = self.tables[ti].entry(req).or_default();
        if pos < t.len() {
            if global && t[pos] != slot {
                return Err(Error::Config(
                    "a shared slot table cannot hold different slots for one position across layers".into(),
                ));
            }
            t[pos] = slot;
        } else if pos == t.len() {
            t.push(slot);
        } else {
            return Err(Error::Index(format!("position {pos} beyond mapped length {}", t.len())));
        }
        Ok(())
    }

    pub fn remove_request(&mut self, req: RequestId) {
        for t in &mut self.tables {
            t.remove(&req);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub n_layers: usize,
    pub kv_width: usize,
    pub latent_dim: usize,
    /// Layers that keep every token uncompressed.
    pub filter_layers: Vec<usize>,
    pub stride: usize,
    pub k_refs: usize,
    pub n_sink: usize,
    pub n_recent: usize,
    pub latent_mode: LatentMode,
    pub full_capacity: usize,
    pub latent_capacity: usize,
    pub slot_map: SlotMapVariant,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            kv_width: 32,
            latent_dim: 8,
            filter_layers: vec![0],
            stride: 10,
            k_refs: 4,
            n_sink: 4,
            n_recent: 32,
            latent_mode: LatentMode::Raw,
            full_capacity: 8192,
            latent_capacity: 8192,
            slot_map: SlotMapVariant::PerLayer,
        }
    }
}

impl CacheConfig {
    pub fn is_compressed(&self, layer: usize) -> bool {
        !self.filter_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.kv_width == 0 || self.latent_dim == 0 {
            return Err(Error::Config("cache dimensions must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if let Some(&l) = self.filter_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Config(format!("filter layer {l} outside 0..{}", self.n_layers)));
        }
        if self.slot_map == SlotMapVariant::Global && (0..self.n_layers).any(|l| self.is_compressed(l)) {
            return Err(Error::Config(
                "the shared slot table cannot express per-layer retention; use the per-layer variant".into(),
            ));
        }
        Ok(())
    }
}

/// One compressed layer's view of a request.
#[derive(Debug, Clone)]
struct CompressedLayer<T> {
    /// Positions currently in the latent tier, ascending and contiguous.
    compressed: Vec<usize>,
    /// Non-sink positions still in full slots, oldest first.
    window: VecDeque<usize>,
    /// Reference entries used when each latent position was compressed.
    latent_refs: BTreeMap<usize, Vec<usize>>,
    refs: ReferenceSet<T>,
    /// Full slot per reference entry.
    ref_slots: Vec<usize>,
    /// Set by a deferred push until the next migration.
    deferred: bool,
}

#[derive(Debug, Clone)]
pub struct RequestState<T> {
    pub id: RequestId,
    lens: Vec<usize>,
    layers: Vec<Option<CompressedLayer<T>>>,
}

impl<T: Real> RequestState<T> {
    pub fn len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    pub fn is_empty(&self) -> bool {
        self.lens.iter().all(|&n| n == 0)
    }
}

/// How a view position is sourced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    /// Sink or recent token, read from its full slot.
    Resident,
    /// Compressed reference token, read from its reference slot.
    Reference(usize),
    /// Compressed token reconstructed into the given temp slot.
    Temp(usize),
}

/// Logical view for one layer group: positions in ascending order and where
/// each comes from. Temp slots are shared by every sparse layer of the group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualSlotMapping {
    pub req: RequestId,
    pub layers: Vec<usize>,
    pub positions: Vec<usize>,
    pub sources: Vec<ViewSource>,
    pub temp_slots: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub reconstructions: u64,
    pub compressions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub tokens: usize,
    pub full_live_slots: usize,
    pub full_bytes: usize,
    pub latent_live_slots: usize,
    pub latent_bytes: usize,
    pub temp_live_slots: usize,
    pub temp_bytes: usize,
    pub reference_slots: usize,
    pub window_slots: usize,
    pub filter_slots: usize,
    /// Excess of window tokens over latent storage, plus temp bytes.
    pub overhead_bytes: usize,
    /// Live full and latent bytes minus the window excess.
    pub measured_bytes: usize,
    pub dense_bytes: usize,
    pub kr_predicted: f64,
    pub kr_measured: f64,
    /// Shrink of one latent relative to its unquantized code.
    pub latent_shrink: f64,
}

#[derive(Debug, Clone)]
pub struct CacheManager<T> {
    config: CacheConfig,
    full: FullPool<T>,
    latent: LatentPool<T>,
    map: SlotMap,
    requests: BTreeMap<RequestId, RequestState<T>>,
    temp_live: BTreeSet<usize>,
    stats: CacheStats,
}

impl<T: Real> CacheManager<T> {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let segments = match config.slot_map {
            SlotMapVariant::PerLayer => 1,
            SlotMapVariant::Global => config.n_layers,
        };
        Ok(Self {
            full: FullPool::new(config.full_capacity, config.kv_width, segments),
            latent: LatentPool::new(config.latent_capacity, config.latent_dim, config.latent_mode),
            map: SlotMap::new(config.slot_map, config.n_layers),
            requests: BTreeMap::new(),
            temp_live: BTreeSet::new(),
            stats: CacheStats::default(),
            config,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn full_pool(&self) -> &FullPool<T> {
        &self.full
    }

    pub fn latent_pool(&self) -> &LatentPool<T> {
        &self.latent
    }

    pub fn slot_map(&self) -> &SlotMap {
        &self.map
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats::default();
    }

    pub fn register(&mut self, req: RequestId) -> Result<()> {
        if self.requests.contains_key(&req) {
            return Err(Error::Lifecycle(format!("request {req} already registered")));
        }
        let layers = (0..self.config.n_layers)
            .map(|l| {
                if self.config.is_compressed(l) {
                    Ok(Some(CompressedLayer {
                        compressed: Vec::new(),
                        window: VecDeque::new(),
                        latent_refs: BTreeMap::new(),
                        refs: ReferenceSet::new(self.config.stride, self.config.kv_width)?,
                        ref_slots: Vec::new(),
                        deferred: false,
                    }))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.requests.insert(req, RequestState { id: req, lens: vec![0; self.config.n_layers], layers });
        Ok(())
    }

    pub fn request(&self, req: RequestId) -> Result<&RequestState<T>> {
        self.requests.get(&req).ok_or_else(|| Error::Lifecycle(format!("request {req} is not registered")))
    }

    fn request_mut(&mut self, req: RequestId) -> Result<&mut RequestState<T>> {
        self.requests.get_mut(&req).ok_or_else(|| Error::Lifecycle(format!("request {req} is not registered")))
    }

    pub fn request_ids(&self) -> Vec<RequestId> {
        self.requests.keys().copied().collect()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Index(format!("layer {layer} of {}", self.config.n_layers)));
        }
        Ok(())
    }

    fn segment(&self, layer: usize) -> usize {
        match self.config.slot_map {
            SlotMapVariant::PerLayer => 0,
            SlotMapVariant::Global => layer,
        }
    }

    /// Appends a token, migrating the oldest recent token first when the
    /// recent region is full.
    pub fn append_token(&mut self, req: RequestId, layer: usize, kv: &[T], codec: &CodecParams<T>) -> Result<()> {
        self.check_layer(layer)?;
        let full = self
            .request(req)?
            .layers[layer]
            .as_ref()
            .is_some_and(|c| c.window.len() >= self.config.n_recent && !c.deferred);
        if full {
            self.overflow_migrate(req, layer, codec)?;
        }
        self.push_token(req, layer, kv)?;
        self.migrate_overflow(req, layer, codec)?;
        Ok(())
    }

    /// Appends without migrating; the recent region may exceed `n_recent`
    /// until [`Self::migrate_overflow`] runs.
    pub fn push_token(&mut self, req: RequestId, layer: usize, kv: &[T]) -> Result<()> {
        self.check_layer(layer)?;
        if kv.len() != self.config.kv_width {
            return Err(Error::Shape(format!("KV of width {} vs {}", kv.len(), self.config.kv_width)));
        }
        let pos = self.request(req)?.lens[layer];
        let seg = self.segment(layer);
        let compressed = self.config.is_compressed(layer);
        let slot = match self.map.get(req, layer, pos) {
            Some(existing) if self.config.slot_map == SlotMapVariant::Global => existing.slot,
            _ => self.full.alloc.alloc_one()?,
        };
        self.full.write(slot, seg, kv)?;
        self.map.set(req, layer, pos, SlotRef { tier: Tier::Full, slot })?;
        if compressed && pos % self.config.stride == 0 {
            let ref_slot = match self.full.alloc.alloc_one() {
                Ok(s) => s,
                Err(e) => {
                    self.full.free(&[slot])?;
                    return Err(e);
                }
            };
            self.full.write(ref_slot, seg, kv)?;
            let c = self.requests.get_mut(&req).expect("checked").layers[layer].as_mut().expect("compressed");
            c.refs.maybe_append(pos, kv)?;
            c.ref_slots.push(ref_slot);
        }
        let n_sink = self.config.n_sink;
        let state = self.request_mut(req)?;
        state.lens[layer] = pos + 1;
        if let Some(c) = state.layers[layer].as_mut() {
            if pos >= n_sink {
                c.window.push_back(pos);
            }
            c.deferred = true;
        }
        Ok(())
    }

    /// Compresses recent tokens until at most `n_recent` remain.
    pub fn migrate_overflow(&mut self, req: RequestId, layer: usize, codec: &CodecParams<T>) -> Result<usize> {
        self.check_layer(layer)?;
        let mut moved = 0;
        while self.request(req)?.layers[layer].as_ref().is_some_and(|c| c.window.len() > self.config.n_recent) {
            self.overflow_migrate(req, layer, codec)?;
            moved += 1;
        }
        if let Some(c) = self.request_mut(req)?.layers[layer].as_mut() {
            c.deferred = false;
        }
        Ok(moved)
    }

    /// Compresses the oldest recent token when the recent region is at
    /// capacity; no-op below capacity or on filter layers.
    pub fn overflow_migrate(&mut self, req: RequestId, layer: usize, codec: &CodecParams<T>) -> Result<()> {
        self.check_layer(layer)?;
        let n_recent = self.config.n_recent;
        let Some(c) = self.request(req)?.layers[layer].as_ref() else { return Ok(()) };
        if c.window.len() < n_recent.max(1) {
            return Ok(());
        }
        let pos = c.window[0];
        let window_slot = self.map.get(req, layer, pos).expect("window position mapped").slot;
        let kv = self.full.read(window_slot, self.segment(layer))?.to_vec();
        let entries = c.refs.topk(&kv, self.config.k_refs, pos);
        let bar = c.refs.mean_reference(&entries)?;
        let z = codec.compress(&kv, &bar)?;
        let lslot = self.latent.alloc.alloc_one()?;
        self.latent.write(lslot, &z)?;
        self.full.free(&[window_slot])?;
        self.map.set(req, layer, pos, SlotRef { tier: Tier::Latent, slot: lslot })?;
        self.stats.compressions += 1;
        let c = self.requests.get_mut(&req).expect("checked").layers[layer].as_mut().expect("compressed");
        c.window.pop_front();
        c.compressed.push(pos);
        c.latent_refs.insert(pos, entries);
        Ok(())
    }

    /// Full-precision KV of every position in a filter layer, or of the
    /// resident (sink and recent) positions of a compressed layer.
    pub fn resident_kv(&self, req: RequestId, layer: usize) -> Result<(Vec<usize>, Matrix<T>)> {
        self.check_layer(layer)?;
        let seg = self.segment(layer);
        let mut pos = Vec::new();
        let mut data = Vec::new();
        for (p, s) in self.map.entries(req, layer).iter().enumerate() {
            if s.tier == Tier::Full {
                pos.push(p);
                data.extend_from_slice(self.full.read(s.slot, seg)?);
            }
        }
        let m = Matrix::from_vec(pos.len(), self.config.kv_width, data)?;
        Ok((pos, m))
    }

    /// Positions currently in the latent tier of a compressed layer.
    pub fn compressed_positions(&self, req: RequestId, layer: usize) -> Result<&[usize]> {
        Ok(self.request(req)?.layers[layer].as_ref().map_or(&[], |c| c.compressed.as_slice()))
    }

    pub fn reference_set(&self, req: RequestId, layer: usize) -> Result<Option<&ReferenceSet<T>>> {
        Ok(self.request(req)?.layers[layer].as_ref().map(|c| &c.refs))
    }

    /// Reference entries used for a latent position.
    pub fn latent_references(&self, req: RequestId, layer: usize, pos: usize) -> Result<Option<&[usize]>> {
        Ok(self.request(req)?.layers[layer].as_ref().and_then(|c| c.latent_refs.get(&pos)).map(Vec::as_slice))
    }

    /// Stored latent record of a compressed position.
    pub fn latent_record(&self, req: RequestId, layer: usize, pos: usize) -> Result<&LatentRecord<T>> {
        match self.map.get(req, layer, pos) {
            Some(SlotRef { tier: Tier::Latent, slot }) => self.latent.record(slot),
            _ => Err(Error::Index(format!("position {pos} of layer {layer} is not compressed"))),
        }
    }

    /// Protected positions of a compressed layer: sink plus recent.
    pub fn resident_positions(&self, req: RequestId, layer: usize) -> Result<Vec<usize>> {
        Ok(self.map.entries(req, layer).iter().enumerate().filter(|(_, s)| s.tier == Tier::Full).map(|(p, _)| p).collect())
    }

    /// Builds the view for a group of compressed layers: sink, the selected
    /// compressed positions and recent, in logical order. Temp slots for the
    /// selected non-reference positions are allocated once for the group.
    pub fn build_view(&mut self, req: RequestId, layers: &[usize], selected: &[usize]) -> Result<VirtualSlotMapping> {
        let &first = layers.first().ok_or_else(|| Error::Input("empty layer group".into()))?;
        for &l in layers {
            self.check_layer(l)?;
            if !self.config.is_compressed(l) {
                return Err(Error::Config(format!("layer {l} is a filter layer")));
            }
        }
        let state = self.request(req)?;
        let len = state.lens[first];
        let lead = state.layers[first].as_ref().expect("compressed");
        for &l in &layers[1..] {
            let c = state.layers[l].as_ref().expect("compressed");
            if state.lens[l] != len || c.compressed.len() != lead.compressed.len() {
                return Err(Error::Lifecycle(format!("layer {l} is out of step with layer {first}")));
            }
        }
        if let Some(&p) = selected.iter().find(|&&p| p >= len) {
            return Err(Error::Index(format!("selected position {p} beyond {len} cached tokens")));
        }
        let chosen: BTreeSet<usize> = selected.iter().copied().collect();
        let mut positions = Vec::new();
        let mut sources = Vec::new();
        let mut n_temp = 0;
        for (p, s) in self.map.entries(req, first).iter().enumerate() {
            match s.tier {
                Tier::Full => {
                    positions.push(p);
                    sources.push(ViewSource::Resident);
                }
                Tier::Latent if chosen.contains(&p) => {
                    positions.push(p);
                    match lead.refs.entry_of(p) {
                        Some(e) => sources.push(ViewSource::Reference(e)),
                        None => {
                            sources.push(ViewSource::Temp(n_temp));
                            n_temp += 1;
                        }
                    }
                }
                Tier::Latent => {}
                Tier::Temp => return Err(Error::Lifecycle(format!("position {p} mapped to a temp slot"))),
            }
        }
        let temp_slots = self.full.alloc(n_temp)?;
        self.temp_live.extend(&temp_slots);
        Ok(VirtualSlotMapping { req, layers: layers.to_vec(), positions, sources, temp_slots })
    }

    /// Gathers one layer's pre-RoPE KV rows through a view, reconstructing
    /// compressed tokens into the group's temp slots.
    pub fn materialize(&mut self, view: &VirtualSlotMapping, layer: usize, codec: &CodecParams<T>) -> Result<Matrix<T>> {
        if !view.layers.contains(&layer) {
            return Err(Error::Index(format!("layer {layer} is not part of the view's group")));
        }
        if view.temp_slots.iter().any(|s| !self.temp_live.contains(s)) {
            return Err(Error::Lifecycle("view used after its temp slots were released".into()));
        }
        let seg = self.segment(layer);
        let w = self.config.kv_width;
        let mut out = Matrix::zeros(view.positions.len(), w);
        for (i, (&p, &src)) in view.positions.iter().zip(&view.sources).enumerate() {
            let c = self.requests[&view.req].layers[layer].as_ref().expect("compressed");
            match src {
                ViewSource::Resident => {
                    let s = self.map.get(view.req, layer, p).ok_or_else(|| Error::Index(format!("stale position {p}")))?;
                    if s.tier != Tier::Full {
                        return Err(Error::Lifecycle(format!("position {p} is no longer resident")));
                    }
                    out.row_mut(i).copy_from_slice(self.full.read(s.slot, seg)?);
                }
                ViewSource::Reference(e) => {
                    out.row_mut(i).copy_from_slice(self.full.read(c.ref_slots[e], seg)?);
                }
                ViewSource::Temp(t) => {
                    let s = self.map.get(view.req, layer, p).ok_or_else(|| Error::Index(format!("stale position {p}")))?;
                    if s.tier != Tier::Latent {
                        return Err(Error::Lifecycle(format!("position {p} is not compressed")));
                    }
                    let z = self.latent.read(s.slot)?;
                    let bar = c.refs.mean_reference(&c.latent_refs[&p])?;
                    let kv = codec.reconstruct(&z, &bar)?;
                    self.stats.reconstructions += 1;
                    let slot = view.temp_slots[t];
                    self.full.write(slot, seg, &kv)?;
                    out.row_mut(i).copy_from_slice(self.full.read(slot, seg)?);
                }
            }
        }
        Ok(out)
    }

    /// Releases a view's temp slots.
    pub fn post_forward(&mut self, view: VirtualSlotMapping) -> Result<()> {
        for s in &view.temp_slots {
            if !self.temp_live.remove(s) {
                return Err(Error::Lifecycle(format!("temp slot {s} released twice")));
            }
        }
        self.full.free(&view.temp_slots)
    }

    pub fn temp_live(&self) -> usize {
        self.temp_live.len()
    }

    /// Frees every slot of a request and forgets it.
    pub fn release(&mut self, req: RequestId) -> Result<()> {
        let state = self.requests.remove(&req).ok_or_else(|| Error::Lifecycle(format!("request {req} is not registered")))?;
        let mut full = BTreeSet::new();
        let mut latent = Vec::new();
        for layer in 0..self.config.n_layers {
            for s in self.map.entries(req, layer) {
                match s.tier {
                    Tier::Full => {
                        full.insert(s.slot);
                    }
                    Tier::Latent => latent.push(s.slot),
                    Tier::Temp => {}
                }
            }
            if let Some(c) = &state.layers[layer] {
                full.extend(&c.ref_slots);
            }
        }
        self.map.remove_request(req);
        self.full.free(&full.into_iter().collect::<Vec<_>>())?;
        self.latent.free(&latent)
    }

    /// Full slots held by one layer of a request: resident plus reference.
    pub fn full_slots_in_layer(&self, req: RequestId, layer: usize) -> Result<usize> {
        let state = self.request(req)?;
        let resident = self.map.entries(req, layer).iter().filter(|s| s.tier == Tier::Full).count();
        Ok(resident + state.layers[layer].as_ref().map_or(0, |c| c.ref_slots.len()))
    }

    pub fn latent_slots_in_layer(&self, req: RequestId, layer: usize) -> Result<usize> {
        self.request(req)?;
        Ok(self.map.entries(req, layer).iter().filter(|s| s.tier == Tier::Latent).count())
    }

    /// Checks slot ownership and the tier partition of every request.
    pub fn check_invariants(&self) -> Result<()> {
        let global = self.config.slot_map == SlotMapVariant::Global;
        let mut full_owner: BTreeMap<usize, (RequestId, usize, usize)> = BTreeMap::new();
        let mut latent_owner = BTreeSet::new();
        for (&req, state) in &self.requests {
            for layer in 0..self.config.n_layers {
                let entries = self.map.entries(req, layer);
                if !global && entries.len() != state.lens[layer] {
                    return Err(Error::Lifecycle(format!("request {req} layer {layer}: map and length disagree")));
                }
                for (p, s) in entries.iter().enumerate() {
                    match s.tier {
                        Tier::Full => {
                            if let Some(prev) = full_owner.insert(s.slot, (req, layer, p)) {
                                if !(global && prev.0 == req && prev.2 == p) {
                                    return Err(Error::Lifecycle(format!("full slot {} shared by {prev:?} and {:?}", s.slot, (req, layer, p))));
                                }
                            }
                            if !self.full.alloc.is_live(s.slot) {
                                return Err(Error::Lifecycle(format!("full slot {} mapped but free", s.slot)));
                            }
                        }
                        Tier::Latent => {
                            if !latent_owner.insert(s.slot) || !self.latent.alloc.is_live(s.slot) {
                                return Err(Error::Lifecycle(format!("latent slot {} double mapped or free", s.slot)));
                            }
                        }
                        Tier::Temp => return Err(Error::Lifecycle("temp slot in a persistent table".into())),
                    }
                }
                if let Some(c) = &state.layers[layer] {
                    for &s in &c.ref_slots {
                        if full_owner.insert(s, (req, layer, usize::MAX)).is_some() || !self.full.alloc.is_live(s) {
                            return Err(Error::Lifecycle(format!("reference slot {s} shared or free")));
                        }
                    }
                    let n = state.lens[layer];
                    let sink = n.min(self.config.n_sink);
                    let expect_compressed: Vec<usize> = (sink..sink + c.compressed.len()).collect();
                    let expect_window: Vec<usize> = (sink + c.compressed.len()..n).collect();
                    if c.compressed != expect_compressed || c.window.iter().copied().ne(expect_window) {
                        return Err(Error::Lifecycle(format!("request {req} layer {layer}: tiers do not partition 0..{n}")));
                    }
                    if !c.deferred && c.window.len() > self.config.n_recent {
                        return Err(Error::Lifecycle(format!("request {req} layer {layer}: recent region overfull")));
                    }
                    if c.ref_slots.len() != c.refs.len() || c.refs.len() != n.div_ceil(self.config.stride) {
                        return Err(Error::Lifecycle(format!("request {req} layer {layer}: reference count mismatch")));
                    }
                    for (p, s) in entries.iter().enumerate() {
                        let in_latent = s.tier == Tier::Latent;
                        if in_latent != (p >= sink && p < sink + c.compressed.len()) {
                            return Err(Error::Lifecycle(format!("position {p} tier disagrees with partition")));
                        }
                    }
                }
            }
        }
        for &s in &self.temp_live {
            if full_owner.insert(s, (u64::MAX, 0, 0)).is_some() {
                return Err(Error::Lifecycle(format!("temp slot {s} also owned elsewhere")));
            }
        }
        let live: BTreeSet<usize> = self.full.alloc.live_slots().into_iter().collect();
        let owned: BTreeSet<usize> = full_owner.keys().copied().collect();
        if live != owned {
            return Err(Error::Lifecycle("full pool live set differs from owned slots (leak)".into()));
        }
        let live: BTreeSet<usize> = self.latent.alloc.live_slots().into_iter().collect();
        if live != latent_owner {
            return Err(Error::Lifecycle("latent pool live set differs from owned slots (leak)".into()));
        }
        Ok(())
    }

    /// Byte audit of one request against the keep-ratio prediction.
    pub fn memory_audit(&self, req: RequestId) -> Result<MemoryAudit> {
        let state = self.request(req)?;
        let cfg = &self.config;
        let tokens = state.lens.iter().copied().max().unwrap_or(0);
        let (mut reference_slots, mut window_slots, mut filter_slots, mut latent_slots) = (0, 0, 0, 0);
        let mut full_slots = BTreeSet::new();
        for layer in 0..cfg.n_layers {
            for s in self.map.entries(req, layer) {
                match s.tier {
                    Tier::Full => {
                        if full_slots.insert(s.slot) {
                            if cfg.is_compressed(layer) {
                                window_slots += 1;
                            } else {
                                filter_slots += 1;
                            }
                        }
                    }
                    Tier::Latent => latent_slots += 1,
                    Tier::Temp => {}
                }
            }
            if let Some(c) = &state.layers[layer] {
                reference_slots += c.ref_slots.len();
            }
        }
        let fb = self.full.slot_bytes();
        let lb = self.latent.slot_bytes();
        let full_live = full_slots.len() + reference_slots;
        let temp = self.temp_live.len();
        let full_bytes = full_live * fb;
        let latent_bytes = latent_slots * lb;
        // Window tokens sit in the full tier instead of the latent pool; their
        // excess over a latent slot is the fixed overhead the ratio ignores.
        let window_excess = window_slots * fb.saturating_sub(lb);
        let overhead = window_excess + temp * fb;
        let measured = full_bytes + latent_bytes - window_excess;
        let dense = cfg.n_layers * tokens * cfg.kv_width * T::BYTES;
        let shrink = (cfg.latent_dim * T::BYTES) as f64 / lb as f64;
        let l_full = cfg.filter_layers.iter().collect::<BTreeSet<_>>().len();
        let kr = keep_ratio(l_full, cfg.n_layers, cfg.stride, cfg.latent_dim as f64 / cfg.kv_width as f64, shrink);
        Ok(MemoryAudit {
            tokens,
            full_live_slots: full_live,
            full_bytes,
            latent_live_slots: latent_slots,
            latent_bytes,
            temp_live_slots: temp,
            temp_bytes: temp * fb,
            reference_slots,
            window_slots,
            filter_slots,
            overhead_bytes: overhead,
            measured_bytes: measured,
            dense_bytes: dense,
            kr_predicted: kr,
            kr_measured: if dense == 0 { 0.0 } else { measured as f64 / dense as f64 },
            latent_shrink: shrink,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CodecVariant};

    fn identity(w: usize) -> CodecParams<f64> {
        CodecParams::init(&CodecConfig::for_kv_width(CodecVariant::IdentityLinear, w), 0).unwrap()
    }

    #[test]
    fn allocator_examples() {
        let mut a = SlotAllocator::new(4);
        assert_eq!(a.alloc(1).unwrap(), vec![0]);
        a.free(&[0]).unwrap();
        assert_eq!(a.alloc(3).unwrap(), vec![0, 1, 2]);
        a.free(&[1]).unwrap();
        assert_eq!(a.alloc(1).unwrap(), vec![1]);
        assert!(matches!(a.free(&[3]), Err(Error::Lifecycle(_))));
        assert!(matches!(a.free(&[0, 0]), Err(Error::Lifecycle(_))));
        assert!(matches!(SlotAllocator::new(2).alloc(3), Err(Error::PoolExhausted(_))));
    }

    #[test]
    fn migration_counts() {
        let cfg = CacheConfig { n_layers: 2, kv_width: 4, latent_dim: 4, stride: 5, n_sink: 2, n_recent: 3, ..Default::default() };
        let codec = identity(4);
        let mut m = CacheManager::<f64>::new(cfg).unwrap();
        m.register(1).unwrap();
        for t in 0..5 {
            m.append_token(1, 1, &[t as f64; 4], &codec).unwrap();
        }
        assert_eq!(m.latent_slots_in_layer(1, 1).unwrap(), 0);
        m.append_token(1, 1, &[5.0; 4], &codec).unwrap();
        assert_eq!(m.latent_slots_in_layer(1, 1).unwrap(), 1);
        assert_eq!(m.compressed_positions(1, 1).unwrap(), &[2]);
        m.check_invariants().unwrap();
        for t in 6..100 {
            m.append_token(1, 1, &[t as f64; 4], &codec).unwrap();
        }
        assert_eq!(m.full_slots_in_layer(1, 1).unwrap(), 2 + 3 + 20);
        m.check_invariants().unwrap();
        m.release(1).unwrap();
        assert_eq!(m.full_pool().allocator().live_count(), 0);
        assert_eq!(m.latent_pool().allocator().live_count(), 0);
    }

    #[test]
    fn global_map_rejects_compression() {
        let cfg = CacheConfig { n_layers: 2, filter_layers: vec![0], slot_map: SlotMapVariant::Global, ..Default::default() };
        assert!(matches!(CacheManager::<f32>::new(cfg), Err(Error::Config(_))));
        let cfg = CacheConfig { n_layers: 2, kv_width: 2, filter_layers: vec![0, 1], slot_map: SlotMapVariant::Global, ..Default::default() };
        let mut m = CacheManager::<f32>::new(cfg).unwrap();
        m.register(0).unwrap();
        let codec = CodecParams::init(&CodecConfig::for_kv_width(CodecVariant::IdentityLinear, 2), 0).unwrap();
        m.append_token(0, 0, &[1.0, 2.0], &codec).unwrap();
        m.append_token(0, 1, &[3.0, 4.0], &codec).unwrap();
        assert_eq!(m.slot_map().table_count(), 1);
        assert_eq!(m.full_pool().allocator().live_count(), 1);
        m.check_invariants().unwrap();
        assert_eq!(m.resident_kv(0, 1).unwrap().1.data(), &[3.0, 4.0]);
    }

    #[test]
    fn empty_selection_view() {
        let cfg = CacheConfig { n_layers: 2, kv_width: 4, latent_dim: 4, stride: 5, n_sink: 2, n_recent: 3, ..Default::default() };
        let codec = identity(4);
        let mut m = CacheManager::<f64>::new(cfg).unwrap();
        m.register(7).unwrap();
        for t in 0..12 {
            m.append_token(7, 1, &[t as f64; 4], &codec).unwrap();
        }
        let v = m.build_view(7, &[1], &[]).unwrap();
        assert_eq!(v.positions, vec![0, 1, 9, 10, 11]);
        m.post_forward(v).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let v = m.build_view(7, &[1], &all).unwrap();
        assert_eq!(v.positions, all);
        let kv = m.materialize(&v, 1, &codec).unwrap();
        for t in 0..12 {
            assert!((kv.get(t, 0) - t as f64).abs() < 1e-12);
        }
        assert!(matches!(m.build_view(7, &[1], &[12]), Err(Error::Index(_))));
        m.post_forward(v).unwrap();
        assert_eq!(m.temp_live(), 0);
        m.check_invariants().unwrap();
    }
}
