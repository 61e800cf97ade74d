/// Independent stream seed derived from `(seed, stream, index)` with a
/// splitmix64 finalizer, so work items can be reseeded in any order.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_EPOCH: u64 = 2;
pub(crate) const STREAM_NULL: u64 = 3;
pub(crate) const STREAM_SUBSAMPLE: u64 = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(
            derive_seed(1, STREAM_INIT, 0),
            derive_seed(1, STREAM_EPOCH, 0)
        );
        assert_ne!(
            derive_seed(1, STREAM_EPOCH, 0),
            derive_seed(1, STREAM_EPOCH, 1)
        );
        assert_eq!(derive_seed(5, 2, 3), derive_seed(5, 2, 3));
    }
}
