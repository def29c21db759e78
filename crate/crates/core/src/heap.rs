//! Global allocator that never calls the C library's aligned-allocation entry
//! points.
//!
//! The matrix kernels request a fresh 32/64-byte aligned scratch buffer on
//! every call. Some glibc versions fragment their per-thread cache under that
//! pattern until resident memory grows by gigabytes over a training run.
//! Serving over-aligned requests from plain `malloc` with a small header keeps
//! the heap flat. Binaries opt in with
//!
//! ```ignore
//! #[global_allocator]
//! static GLOBAL: plume_marl::heap::PlainMalloc = plume_marl::heap::PlainMalloc;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::ptr;

/// Alignment `malloc` guarantees on every supported 64-bit target.
const MALLOC_ALIGN: usize = 16;

pub struct PlainMalloc;

fn padded(layout: Layout) -> Option<Layout> {
    let size = layout.size().checked_add(layout.align())?;
    Layout::from_size_align(size, MALLOC_ALIGN).ok()
}

unsafe impl GlobalAlloc for PlainMalloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if layout.align() <= MALLOC_ALIGN {
            return System.alloc(layout);
        }
        let Some(outer) = padded(layout) else { return ptr::null_mut() };
        let base = System.alloc(outer);
        if base.is_null() {
            return base;
        }
        // Leave at least one word in front of the block for the base pointer.
        let start = base as usize + size_of::<usize>();
        let aligned = base.add(((start + layout.align() - 1) & !(layout.align() - 1)) - base as usize);
        (aligned as *mut *mut u8).sub(1).write_unaligned(base);
        aligned
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if layout.align() <= MALLOC_ALIGN {
            return System.dealloc(ptr, layout);
        }
        let base = (ptr as *mut *mut u8).sub(1).read_unaligned();
        System.dealloc(base, padded(layout).expect("layout was valid at allocation"));
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        if layout.align() <= MALLOC_ALIGN {
            return System.alloc_zeroed(layout);
        }
        let p = self.alloc(layout);
        if !p.is_null() {
            ptr::write_bytes(p, 0, layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if layout.align() <= MALLOC_ALIGN {
            return System.realloc(ptr, layout, new_size);
        }
        let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
        let fresh = self.alloc(new_layout);
        if !fresh.is_null() {
            ptr::copy_nonoverlapping(ptr, fresh, layout.size().min(new_size));
            self.dealloc(ptr, layout);
        }
        fresh
    }
}
