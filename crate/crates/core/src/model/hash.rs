/// Seedless 64-bit finalizer (the splitmix64 mixing function). Every node
/// computes the same bucket for the same key with no coordination, which the
/// shuffle schemes rely on.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn hash_key(key: u64, num_buckets: u32) -> u32 {
    debug_assert!(num_buckets >= 1);
    (mix64(key) % num_buckets as u64) as u32
}
