use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checksum::{strip_crc, Decoder, Encoder};
use crate::fault::StorageEnv;
use crate::metafile::MetaFiles;

use super::{BlockError, BlockId, DatanodeId};

pub const VERSION_FILE: &str = "nn/VERSION";
pub const SEEN_TXID_FILE: &str = "nn/seen_txid";
pub const JOURNAL_FILE: &str = "nn/edits.log";

/// Contents of the `VERSION` role file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageInfo {
    pub layout_version: i32,
    pub namespace_id: u64,
    pub cluster_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub len: u64,
    pub datanodes: Vec<DatanodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Edit {
    AddBlock { id: BlockId, len: u64, datanodes: Vec<DatanodeId> },
    DeleteBlock { id: BlockId },
    AddFile { path: String, blocks: Vec<BlockId> },
}

impl Edit {
    fn encode(&self, txid: u64) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(txid);
        match self {
            Edit::AddBlock { id, len, datanodes } => {
                e.u8(1).u64(*id).u64(*len).varint(datanodes.len() as u64);
                for d in datanodes {
                    e.u32(*d as u32);
                }
            }
            Edit::DeleteBlock { id } => {
                e.u8(2).u64(*id);
            }
            Edit::AddFile { path, blocks } => {
                e.u8(3).bytes(path.as_bytes()).varint(blocks.len() as u64);
                for b in blocks {
                    e.u64(*b);
                }
            }
        }
        e.seal_crc();
        let body = e.finish();
        let mut frame = (body.len() as u32).to_le_bytes().to_vec();
        frame.extend_from_slice(&body);
        frame
    }

    fn decode(body: &[u8]) -> Option<(u64, Edit)> {
        let mut d = Decoder::new(strip_crc(body)?);
        let txid = d.u64().ok()?;
        let edit = match d.u8().ok()? {
            1 => {
                let id = d.u64().ok()?;
                let len = d.u64().ok()?;
                let n = d.len_prefix().ok()?;
                let datanodes = (0..n).map(|_| d.u32().map(|x| x as DatanodeId)).collect::<Result<_, _>>().ok()?;
                Edit::AddBlock { id, len, datanodes }
            }
            2 => Edit::DeleteBlock { id: d.u64().ok()? },
            3 => {
                let path = String::from_utf8(d.bytes().ok()?.to_vec()).ok()?;
                let n = d.len_prefix().ok()?;
                let blocks = (0..n).map(|_| d.u64()).collect::<Result<_, _>>().ok()?;
                Edit::AddFile { path, blocks }
            }
            _ => return None,
        };
        d.is_empty().then_some((txid, edit))
    }
}

/// Namespace server: file and block maps, a local edit journal, and role
/// metadata files kept in several checksummed copies.
#[derive(Debug)]
pub struct Namenode {
    env: Arc<StorageEnv>,
    meta: MetaFiles,
    info: StorageInfo,
    txid: u64,
    files: BTreeMap<String, Vec<BlockId>>,
    blocks: BTreeMap<BlockId, BlockMeta>,
    next_block: BlockId,
}

impl Namenode {
    /// Opens the namespace, formatting it if no `VERSION` file exists.
    pub fn open(env: Arc<StorageEnv>) -> Result<Self, BlockError> {
        let meta = MetaFiles::new(env.clone());
        let info = if meta.exists(VERSION_FILE) {
            let raw = meta.read(VERSION_FILE)?;
            serde_json::from_slice(&raw).map_err(|e| BlockError::Namespace(format!("VERSION: {e}")))?
        } else {
            let info = StorageInfo { layout_version: -66, namespace_id: 0x5eed, cluster_id: "CID-desk".into() };
            meta.write(VERSION_FILE, &serde_json::to_vec(&info).expect("serializable"))?;
            meta.write(SEEN_TXID_FILE, b"0")?;
            info
        };
        let seen: u64 = {
            let raw = meta.read(SEEN_TXID_FILE)?;
            std::str::from_utf8(&raw).ok().and_then(|s| s.trim().parse().ok()).ok_or_else(|| BlockError::Namespace("seen_txid is not a number".into()))?
        };
        let mut nn = Self { env, meta, info, txid: 0, files: BTreeMap::new(), blocks: BTreeMap::new(), next_block: 1 };
        nn.replay()?;
        if nn.txid < seen {
            return Err(BlockError::Namespace(format!("journal ends at txid {} but {seen} was seen", nn.txid)));
        }
        Ok(nn)
    }

    fn replay(&mut self) -> Result<(), BlockError> {
        if !self.env.exists(JOURNAL_FILE) {
            return Ok(());
        }
        let raw = self.env.read_all(JOURNAL_FILE).map_err(|e| BlockError::io(JOURNAL_FILE, e))?;
        let mut pos = 0;
        while pos < raw.len() {
            let bad = || BlockError::Namespace(format!("journal record at byte {pos} is corrupt"));
            let len = u32::from_le_bytes(raw.get(pos..pos + 4).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
            let (txid, edit) = raw.get(pos + 4..pos + 4 + len).and_then(Edit::decode).ok_or_else(bad)?;
            if txid != self.txid + 1 {
                return Err(bad());
            }
            self.txid = txid;
            self.apply(edit);
            pos += 4 + len;
        }
        Ok(())
    }

    fn apply(&mut self, edit: Edit) {
        match edit {
            Edit::AddBlock { id, len, datanodes } => {
                self.next_block = self.next_block.max(id + 1);
                self.blocks.insert(id, BlockMeta { len, datanodes });
            }
            Edit::DeleteBlock { id } => {
                self.blocks.remove(&id);
            }
            Edit::AddFile { path, blocks } => {
                self.files.insert(path, blocks);
            }
        }
    }

    fn log(&mut self, edit: Edit) -> Result<(), BlockError> {
        let txid = self.txid + 1;
        self.env.append(JOURNAL_FILE, &edit.encode(txid)).map_err(|e| BlockError::io(JOURNAL_FILE, e))?;
        self.meta.write(SEEN_TXID_FILE, txid.to_string().as_bytes())?;
        self.txid = txid;
        self.apply(edit);
        Ok(())
    }

    pub fn storage_info(&self) -> &StorageInfo {
        &self.info
    }

    pub fn txid(&self) -> u64 {
        self.txid
    }

    pub fn meta_files(&self) -> &MetaFiles {
        &self.meta
    }

    pub fn allocate_block(&mut self) -> BlockId {
        let id = self.next_block;
        self.next_block += 1;
        id
    }

    pub fn add_block(&mut self, id: BlockId, len: u64, datanodes: Vec<DatanodeId>) -> Result<(), BlockError> {
        self.log(Edit::AddBlock { id, len, datanodes })
    }

    pub fn delete_block(&mut self, id: BlockId) -> Result<(), BlockError> {
        if !self.blocks.contains_key(&id) {
            return Err(BlockError::UnknownBlock(id));
        }
        self.log(Edit::DeleteBlock { id })
    }

    pub fn add_file(&mut self, path: &str, blocks: Vec<BlockId>) -> Result<(), BlockError> {
        self.log(Edit::AddFile { path: path.to_string(), blocks })
    }

    pub fn file_blocks(&self, path: &str) -> Option<&[BlockId]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn files(&self) -> impl Iterator<Item = (&str, &[BlockId])> {
        self.files.iter().map(|(p, b)| (p.as_str(), b.as_slice()))
    }

    /// The full replica set of a block, handed to a reader before it
    /// starts streaming.
    pub fn block_locations(&self, id: BlockId) -> Option<&BlockMeta> {
        self.blocks.get(&id)
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.keys().copied()
    }
}
