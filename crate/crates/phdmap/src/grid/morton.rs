//! 3D Morton (Z-order) codes for voxel indexing.

use thiserror::Error;

/// Maximum bits per axis representable in a u64 interleave.
pub const MAX_BITS: u32 = 21;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MortonError {
    #[error("voxel index {0} exceeds {1} bits")]
    Overflow(u64, u32),
}

// Spreads the low 21 bits of `w` so that two zero bits separate each input bit.
fn spread(mut w: u64) -> u64 {
    w &= 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x100f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

fn compact(mut w: u64) -> u64 {
    w &= 0x1249_2492_4924_9249;
    w = (w ^ (w >> 2)) & 0x10c3_0c30_c30c_30c3;
    w = (w ^ (w >> 4)) & 0x100f_00f0_0f00_f00f;
    w = (w ^ (w >> 8)) & 0x001f_0000_ff00_00ff;
    w = (w ^ (w >> 16)) & 0x001f_0000_0000_ffff;
    w = (w ^ (w >> 32)) & 0x1f_ffff;
    w
}

/// Interleaves three voxel indices into a Morton code. Rejects indices that
/// do not fit in [`MAX_BITS`] bits.
pub fn morton_encode(ix: u64, iy: u64, iz: u64) -> Result<u64, MortonError> {
    for v in [ix, iy, iz] {
        if v >= 1 << MAX_BITS {
            return Err(MortonError::Overflow(v, MAX_BITS));
        }
    }
    Ok(spread(ix) | spread(iy) << 1 | spread(iz) << 2)
}

/// Inverts [`morton_encode`] exactly.
pub fn morton_decode(code: u64) -> (u64, u64, u64) {
    (compact(code), compact(code >> 1), compact(code >> 2))
}
