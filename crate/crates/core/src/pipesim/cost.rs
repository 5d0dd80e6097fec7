/// Ring all-reduce over `ranks` participants: `2V·(R−1)/R` bytes per rank
/// divided by the link bandwidth.
pub fn allreduce_time(volume: f64, ranks: usize, bandwidth: f64) -> f64 {
    if ranks <= 1 || volume == 0.0 {
        return 0.0;
    }
    let r = ranks as f64;
    2.0 * volume * (r - 1.0) / r / bandwidth
}

/// Time to synchronize a tied embedding held by the first and last stage of
/// `data_ways` pipelines.
///
/// Unfused, each stage first all-reduces over its `D` data-parallel peers and
/// then the two stages all-reduce with each other: `V·(3D−2)/D`. Fused, one
/// all-reduce spans all `2D` copies: `V·(2D−1)/D`.
pub fn embedding_sync_time(volume: f64, data_ways: usize, bandwidth: f64, fused: bool) -> f64 {
    if fused {
        allreduce_time(volume, 2 * data_ways, bandwidth)
    } else {
        allreduce_time(volume, data_ways, bandwidth) + allreduce_time(volume, 2, bandwidth)
    }
}
