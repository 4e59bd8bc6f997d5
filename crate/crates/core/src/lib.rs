pub mod attack;
pub mod detectors;
pub mod diffmath;
pub mod evalmetrics;
pub mod camotex;
pub mod image;
pub mod meshgeom;
pub mod render;

/// Sizes the global worker pool used by data-parallel helpers. Only the first
/// call has an effect; without the `parallel` feature this is a no-op.
pub fn init_workers(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
