//! The demo function library built as a shared object, so executors can
//! load it from a code submission instead of the built-in registry.
//!
//! Every entry has the signature
//! `extern "C" fn(input: *const u8, size: u32, output: *mut u8) -> u32`
//! and returns the number of output bytes, or `u32::MAX` on failure.

use std::cell::{Cell, RefCell};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use spotlease::functions::{self, BuiltinFn, WorkerCache, CODE_OBJECT_ERROR};

/// Exported entry symbols, in registry order.
pub const SYMBOLS: [&str; 5] = ["echo", "blackscholes_batch", "mmm_half", "jacobi_step", "fail"];

thread_local! {
    static CAPACITY: Cell<usize> = const { Cell::new(0) };
    static CACHE: RefCell<WorkerCache> = RefCell::new(WorkerCache::default());
}

/// Called once per worker with the size of its output region.
#[no_mangle]
pub extern "C" fn spotlease_output_capacity(bytes: u32) {
    CAPACITY.with(|c| c.set(bytes as usize));
}

/// # Safety
/// `input` must be valid for `size` bytes and `output` for the announced
/// capacity.
unsafe fn run(f: BuiltinFn, input: *const u8, size: u32, output: *mut u8) -> u32 {
    let input = if size == 0 {
        &[][..]
    } else {
        slice::from_raw_parts(input, size as usize)
    };
    let capacity = CAPACITY.with(Cell::get);
    let out = if capacity == 0 {
        &mut [][..]
    } else {
        slice::from_raw_parts_mut(output, capacity)
    };
    let result = catch_unwind(AssertUnwindSafe(|| CACHE.with(|c| f(&mut c.borrow_mut(), input, out))));
    match result {
        Ok(Ok(n)) => n as u32,
        _ => CODE_OBJECT_ERROR,
    }
}

macro_rules! export {
    ($($name:ident),*) => {$(
        /// # Safety
        /// See the crate documentation.
        #[no_mangle]
        pub unsafe extern "C" fn $name(input: *const u8, size: u32, output: *mut u8) -> u32 {
            run(functions::$name, input, size, output)
        }
    )*};
}

export!(echo, blackscholes_batch, mmm_half, jacobi_step);

/// Always fails.
///
/// # Safety
/// Never dereferences its arguments.
#[no_mangle]
pub unsafe extern "C" fn fail(_input: *const u8, _size: u32, _output: *mut u8) -> u32 {
    CODE_OBJECT_ERROR
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_respect_capacity() {
        let input = *b"abc";
        let mut out = [0u8; 8];
        spotlease_output_capacity(2);
        assert_eq!(unsafe { echo(input.as_ptr(), 3, out.as_mut_ptr()) }, CODE_OBJECT_ERROR);
        spotlease_output_capacity(out.len() as u32);
        assert_eq!(unsafe { echo(input.as_ptr(), 3, out.as_mut_ptr()) }, 3);
        assert_eq!(&out[..3], b"abc");
        assert_eq!(unsafe { fail(input.as_ptr(), 3, out.as_mut_ptr()) }, CODE_OBJECT_ERROR);
    }

    #[test]
    fn symbols_cover_the_demo_registry() {
        let demo: Vec<&str> = functions::registry("demo").unwrap().iter().map(|e| e.name).collect();
        assert_eq!(demo, SYMBOLS[..4]);
    }
}
