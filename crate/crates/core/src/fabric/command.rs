//! One-sided verb descriptors and ordered command batches.

use super::{FabricError, GlobalAddress};

/// Distinguishes payload writes from lock-release writes so the metrics can
/// report write amplification separately from lock traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    Data,
    LockRelease,
}

#[derive(Debug, Clone)]
pub enum Verb {
    Read {
        len: usize,
    },
    Write {
        payload: Vec<u8>,
        kind: WriteKind,
    },
    Cas {
        compare: u64,
        swap: u64,
    },
    /// If `(word & mask) == (compare & mask)`, the masked bits become
    /// `swap & mask`; bits outside the mask are never touched.
    MaskedCas {
        compare: u64,
        swap: u64,
        mask: u64,
    },
    Faa {
        delta: u64,
    },
}

#[derive(Debug, Clone)]
pub struct Command {
    pub addr: GlobalAddress,
    pub verb: Verb,
    pub signaled: bool,
}

impl Command {
    pub fn read(addr: GlobalAddress, len: usize) -> Self {
        Command {
            addr,
            verb: Verb::Read { len },
            signaled: true,
        }
    }

    pub fn write(addr: GlobalAddress, payload: Vec<u8>) -> Self {
        Command {
            addr,
            verb: Verb::Write {
                payload,
                kind: WriteKind::Data,
            },
            signaled: true,
        }
    }

    pub fn write_unsignaled(addr: GlobalAddress, payload: Vec<u8>) -> Self {
        Command {
            addr,
            verb: Verb::Write {
                payload,
                kind: WriteKind::Data,
            },
            signaled: false,
        }
    }

    pub fn lock_release(addr: GlobalAddress, payload: Vec<u8>) -> Self {
        Command {
            addr,
            verb: Verb::Write {
                payload,
                kind: WriteKind::LockRelease,
            },
            signaled: true,
        }
    }

    pub fn cas(addr: GlobalAddress, compare: u64, swap: u64) -> Self {
        Command {
            addr,
            verb: Verb::Cas { compare, swap },
            signaled: true,
        }
    }

    pub fn masked_cas(addr: GlobalAddress, compare: u64, swap: u64, mask: u64) -> Self {
        Command {
            addr,
            verb: Verb::MaskedCas {
                compare,
                swap,
                mask,
            },
            signaled: true,
        }
    }

    pub fn faa(addr: GlobalAddress, delta: u64) -> Self {
        Command {
            addr,
            verb: Verb::Faa { delta },
            signaled: true,
        }
    }
}

/// Ordered sequence of commands targeting one memory server, posted in a
/// single call. The MS applies them in list order.
#[derive(Debug, Clone)]
pub struct CombineList {
    ms_id: u16,
    cmds: Vec<Command>,
}

impl CombineList {
    pub fn new(ms_id: u16) -> Self {
        CombineList {
            ms_id,
            cmds: Vec::new(),
        }
    }

    pub fn ms_id(&self) -> u16 {
        self.ms_id
    }

    pub fn push(&mut self, cmd: Command) -> Result<(), FabricError> {
        if cmd.addr.ms_id != self.ms_id {
            return Err(FabricError::CrossMs {
                list: self.ms_id,
                cmd: cmd.addr.ms_id,
            });
        }
        self.cmds.push(cmd);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cmds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cmds.is_empty()
    }

    pub(crate) fn into_commands(self) -> Vec<Command> {
        self.cmds
    }
}

/// Result of a signaled command, delivered in post order per queue pair.
#[derive(Debug, Clone)]
pub struct Completion {
    /// Per-QP post sequence number.
    pub ticket: u64,
    pub value: CompletionValue,
    /// Client virtual time when the post was issued.
    pub issued_at: u64,
    /// MS mutation-clock samples bracketing a read's chunk assembly. Equal
    /// unless mutations landed on the MS between chunks.
    pub assembly_start: u64,
    pub assembly_end: u64,
    /// Client virtual time when the completion was delivered.
    pub sim_time: u64,
}

impl Completion {
    /// Virtual-time span over which the read result was assembled, the input
    /// to the version-wraparound retry rule.
    pub fn assembly_window(&self) -> u64 {
        self.assembly_end.saturating_sub(self.assembly_start)
    }
}

#[derive(Debug, Clone)]
pub enum CompletionValue {
    None,
    Bytes(Vec<u8>),
    Word(u64),
}
