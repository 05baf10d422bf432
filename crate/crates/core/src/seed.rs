//! Deterministic seed derivation for independent random streams.

/// Stream tags so that training, center, local and evaluation runs never
/// share noise realizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Training = 1,
    Center = 2,
    Local = 3,
    Evaluation = 4,
    Fit = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ ((stream as u64) << 56)) ^ index)
}

/// Seed of trial `trial` inside a session seeded with `session`.
pub fn trial(session: u64, trial: usize) -> u64 {
    splitmix64(session.wrapping_add(trial as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, Stream::Training, 0), derive(1, Stream::Local, 0));
        assert_ne!(derive(1, Stream::Training, 0), derive(1, Stream::Training, 1));
        assert_eq!(derive(9, Stream::Fit, 3), derive(9, Stream::Fit, 3));
    }
}
