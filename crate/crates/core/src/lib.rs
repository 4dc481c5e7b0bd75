//! Compositional 3D tooth generation: graph-diffusion layout synthesis for
//! missing teeth followed by alternating scene/instance Gaussian-splat
//! optimization with a collision penalty between neighboring teeth.

pub mod collision;
pub mod distill;
pub mod gsplat;
pub mod jawgraph;
pub mod layoutdiffusion;
pub mod metrics;
pub mod synthjaw;

/// Combines seed components into one well-mixed 64-bit seed (splitmix64
/// finalizer applied per component).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
