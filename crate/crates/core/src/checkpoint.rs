//! Model checkpoints in the `XDWT` container.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::Result;
use crate::model::{Architecture, ModelConfig, Vae};

pub const MAGIC: [u8; 4] = *b"XDWT";

pub fn to_container(vae: &Vae<f32>) -> Container {
    let mut c = Container::new(MAGIC, vae.architecture().tag(), vae.config().to_header());
    c.records = vae.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    c
}

pub fn from_container(c: Container) -> Result<Vae<f32>> {
    let arch = Architecture::from_tag(c.tag)?;
    let config = ModelConfig::from_header(&c.header)?;
    // Weights are overwritten below; the generator only fills the layout.
    let mut vae = Vae::new(config, arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    vae.params_mut().load(c.records)?;
    Ok(vae)
}

pub fn save(vae: &Vae<f32>, path: &Path) -> Result<()> {
    to_container(vae).save(path)
}

pub fn load(path: &Path) -> Result<Vae<f32>> {
    from_container(Container::load(path, MAGIC)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { base_channels: 4, num_downsamples: 1, input_size: 16, ..Default::default() };
        let vae = Vae::<f32>::new(cfg, Architecture::Expdwt, &mut rng::stream(9, rng::INIT)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save(&vae, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.architecture(), Architecture::Expdwt);
        assert_eq!(back.config(), vae.config());
        assert_eq!(back.params(), vae.params());
        assert_eq!(std::fs::read(&path).unwrap(), to_container(&back).to_bytes());
    }

    #[test]
    fn rejects_mismatched_records() {
        let cfg = ModelConfig { base_channels: 4, num_downsamples: 1, input_size: 16, ..Default::default() };
        let vae = Vae::<f32>::new(cfg, Architecture::Baseline, &mut rng::stream(9, rng::INIT)).unwrap();
        let mut c = to_container(&vae);
        c.records.pop();
        assert!(from_container(c).is_err());
        let mut c = to_container(&vae);
        c.header[1] = 8;
        assert!(from_container(c).is_err());
    }
}
