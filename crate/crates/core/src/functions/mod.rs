//! Function libraries that workers execute.
//!
//! A library is either one of the built-in registries compiled into this
//! crate ("demo" and "testing") or a dynamic-load code object exporting
//! entries of the form
//!
//! ```text
//! extern "C" fn(input: *const u8, size: u32, output: *mut u8) -> u32
//! ```
//!
//! A code object returns [`CODE_OBJECT_ERROR`] to signal failure. If it
//! exports [`OUTPUT_CAPACITY_SYMBOL`], each worker thread calls it once with
//! the size of its output region before the first invocation.

mod kernels;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

pub use kernels::*;

use crate::protocol::{CodeKind, CodeSubmission};

pub const CODE_OBJECT_ERROR: u32 = u32::MAX;
pub const OUTPUT_CAPACITY_SYMBOL: &str = "spotlease_output_capacity";

pub type RawEntry = unsafe extern "C" fn(*const u8, u32, *mut u8) -> u32;
type CapacityHook = unsafe extern "C" fn(u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FunctionFailure {
    BadInput(&'static str),
    OutputTooSmall,
    Trapped(String),
}

/// Per-worker state that survives between invocations.
#[derive(Debug, Default)]
pub struct WorkerCache {
    pub jacobi: Option<JacobiCache>,
}

pub type BuiltinFn = fn(&mut WorkerCache, &[u8], &mut [u8]) -> Result<usize, FunctionFailure>;

#[derive(Debug, Clone, Copy)]
pub struct FunctionEntry {
    pub name: &'static str,
    pub entry: BuiltinFn,
}

const DEMO: &[FunctionEntry] = &[
    FunctionEntry { name: "echo", entry: echo },
    FunctionEntry { name: "blackscholes_batch", entry: blackscholes_batch },
    FunctionEntry { name: "mmm_half", entry: mmm_half },
    FunctionEntry { name: "jacobi_step", entry: jacobi_step },
];

const TESTING: &[FunctionEntry] = &[
    FunctionEntry { name: "echo", entry: echo },
    FunctionEntry { name: "sleep", entry: sleep },
    FunctionEntry { name: "trap", entry: trap },
    FunctionEntry { name: "fill", entry: fill },
];

pub fn registry(name: &str) -> Option<&'static [FunctionEntry]> {
    match name {
        "demo" => Some(DEMO),
        "testing" => Some(TESTING),
        _ => None,
    }
}

/// Sleeps for the little-endian u64 number of milliseconds at the start of
/// the input, then echoes the input.
fn sleep(cache: &mut WorkerCache, input: &[u8], out: &mut [u8]) -> Result<usize, FunctionFailure> {
    let ms = input
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or(FunctionFailure::BadInput("sleep needs a u64 duration"))?;
    std::thread::sleep(Duration::from_millis(ms));
    echo(cache, input, out)
}

fn trap(_: &mut WorkerCache, _: &[u8], _: &mut [u8]) -> Result<usize, FunctionFailure> {
    panic!("trap function invoked");
}

/// Writes as many 0xAB bytes as the little-endian u32 in the input asks for.
fn fill(_: &mut WorkerCache, input: &[u8], out: &mut [u8]) -> Result<usize, FunctionFailure> {
    let n = input
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or(FunctionFailure::BadInput("fill needs a u32 length"))?;
    out.get_mut(..n)
        .ok_or(FunctionFailure::OutputTooSmall)?
        .fill(0xAB);
    Ok(n)
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("unknown registry {0:?}")]
    UnknownRegistry(String),
    #[error("symbol {0:?} not found")]
    MissingSymbol(String),
    #[error("invalid function table: {0}")]
    InvalidTable(#[from] crate::protocol::ProtocolError),
    #[error("cannot load code object: {0}")]
    Load(String),
}

enum Entries {
    Builtin(Vec<BuiltinFn>),
    CodeObject {
        entries: Vec<RawEntry>,
        capacity_hook: Option<CapacityHook>,
        // Dropped after the entries above; the file must outlive the mapping.
        _library: libloading::Library,
        _file: tempfile::TempPath,
    },
}

/// A function table resolved from a [`CodeSubmission`], shared by all
/// workers of a sandbox.
pub struct FunctionTable {
    entries: Entries,
}

impl std::fmt::Debug for FunctionTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionTable").field("len", &self.len()).finish()
    }
}

impl FunctionTable {
    pub fn load(code: &CodeSubmission) -> Result<Arc<Self>, LoadError> {
        code.validate()?;
        let mut order: Vec<_> = code.functions.iter().collect();
        order.sort_by_key(|f| f.index);
        let entries = match &code.code {
            CodeKind::BuiltinRegistry(name) => {
                let reg = registry(name).ok_or_else(|| LoadError::UnknownRegistry(name.clone()))?;
                let fns = order
                    .iter()
                    .map(|f| {
                        reg.iter()
                            .find(|e| e.name == f.symbol)
                            .map(|e| e.entry)
                            .ok_or_else(|| LoadError::MissingSymbol(f.symbol.clone()))
                    })
                    .collect::<Result<_, _>>()?;
                Entries::Builtin(fns)
            }
            CodeKind::CodeObject(bytes) => {
                let mut file = tempfile::Builder::new()
                    .prefix("flib-")
                    .suffix(".so")
                    .tempfile()
                    .map_err(|e| LoadError::Load(e.to_string()))?;
                file.write_all(bytes)
                    .and_then(|_| file.flush())
                    .map_err(|e| LoadError::Load(e.to_string()))?;
                let path = file.into_temp_path();
                // SAFETY: the object is trusted user code by contract; its
                // initializers run here.
                let library = unsafe { libloading::Library::new(&*path) }
                    .map_err(|e| LoadError::Load(e.to_string()))?;
                let mut entries = Vec::with_capacity(order.len());
                for f in &order {
                    // SAFETY: exported entries follow the documented ABI.
                    let sym = unsafe { library.get::<RawEntry>(f.symbol.as_bytes()) }
                        .map_err(|_| LoadError::MissingSymbol(f.symbol.clone()))?;
                    entries.push(*sym);
                }
                let capacity_hook =
                    unsafe { library.get::<CapacityHook>(OUTPUT_CAPACITY_SYMBOL.as_bytes()) }
                        .ok()
                        .map(|s| *s);
                Entries::CodeObject {
                    entries,
                    capacity_hook,
                    _library: library,
                    _file: path,
                }
            }
        };
        Ok(Arc::new(Self { entries }))
    }

    pub fn len(&self) -> usize {
        match &self.entries {
            Entries::Builtin(v) => v.len(),
            Entries::CodeObject { entries, .. } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvokeError {
    UnknownFunction(u16),
    OutputTooSmall,
    Failed(String),
}

/// One worker's view of a function table plus its private cache.
pub struct WorkerFunctions {
    table: Arc<FunctionTable>,
    cache: WorkerCache,
    capacity_announced: Option<usize>,
}

impl WorkerFunctions {
    pub fn new(table: Arc<FunctionTable>) -> Self {
        Self {
            table,
            cache: WorkerCache::default(),
            capacity_announced: None,
        }
    }

    pub fn cache(&self) -> &WorkerCache {
        &self.cache
    }

    pub fn invoke(&mut self, index: u16, input: &[u8], output: &mut [u8]) -> Result<usize, InvokeError> {
        match &self.table.entries {
            Entries::Builtin(fns) => {
                let f = *fns.get(index as usize).ok_or(InvokeError::UnknownFunction(index))?;
                let cache = &mut self.cache;
                match catch_unwind(AssertUnwindSafe(|| f(cache, input, output))) {
                    Ok(Ok(n)) => Ok(n),
                    Ok(Err(FunctionFailure::OutputTooSmall)) => Err(InvokeError::OutputTooSmall),
                    Ok(Err(FunctionFailure::BadInput(msg))) => Err(InvokeError::Failed(msg.into())),
                    Ok(Err(FunctionFailure::Trapped(msg))) => Err(InvokeError::Failed(msg)),
                    Err(panic) => Err(InvokeError::Failed(panic_message(&panic))),
                }
            }
            Entries::CodeObject {
                entries,
                capacity_hook,
                ..
            } => {
                let f = *entries.get(index as usize).ok_or(InvokeError::UnknownFunction(index))?;
                if let Some(hook) = capacity_hook {
                    if self.capacity_announced != Some(output.len()) {
                        // SAFETY: hook follows the documented ABI.
                        unsafe { hook(output.len().min(u32::MAX as usize) as u32) };
                        self.capacity_announced = Some(output.len());
                    }
                }
                // SAFETY: both regions are valid for the stated lengths; the
                // code object is bound by contract to the announced capacity.
                let n = unsafe { f(input.as_ptr(), input.len() as u32, output.as_mut_ptr()) };
                match n {
                    CODE_OBJECT_ERROR => Err(InvokeError::Failed("code object reported an error".into())),
                    n if n as usize > output.len() => Err(InvokeError::OutputTooSmall),
                    n => Ok(n as usize),
                }
            }
        }
    }
}

pub(crate) fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "function panicked".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worker(names: &[&str]) -> WorkerFunctions {
        let table = FunctionTable::load(&CodeSubmission::builtin("testing", names)).unwrap();
        WorkerFunctions::new(table)
    }

    #[test]
    fn resolves_by_symbol_not_position() {
        let mut w = worker(&["fill", "echo"]);
        let mut out = [0u8; 8];
        assert_eq!(w.invoke(1, b"abc", &mut out), Ok(3));
        assert_eq!(&out[..3], b"abc");
        assert_eq!(w.invoke(0, &2u32.to_le_bytes(), &mut out), Ok(2));
        assert_eq!(&out[..2], &[0xAB, 0xAB]);
    }

    #[test]
    fn unknown_index_and_trap() {
        let mut w = worker(&["echo", "trap", "fill"]);
        let mut out = [0u8; 8];
        assert_eq!(w.invoke(9, b"", &mut out), Err(InvokeError::UnknownFunction(9)));
        assert!(matches!(w.invoke(1, b"", &mut out), Err(InvokeError::Failed(_))));
        assert_eq!(w.invoke(2, &100u32.to_le_bytes(), &mut out), Err(InvokeError::OutputTooSmall));
        // the worker is still usable after a trap
        assert_eq!(w.invoke(0, b"ok", &mut out), Ok(2));
    }

    #[test]
    fn missing_symbol_and_registry() {
        assert!(matches!(
            FunctionTable::load(&CodeSubmission::builtin("testing", &["nope"])),
            Err(LoadError::MissingSymbol(_))
        ));
        assert!(matches!(
            FunctionTable::load(&CodeSubmission::builtin("absent", &["echo"])),
            Err(LoadError::UnknownRegistry(_))
        ));
    }
}
