use super::{sigmoid, ToyWorld, TEXTURE_DIMS};
use crate::error::{check_dim, Result};
use crate::image::Image;
use crate::latent::LatentVector;
use crate::models::Generator;

struct Scene {
    background: f64,
    disk: f64,
    /// Per-pixel disk coverage M(p).
    coverage: Vec<f64>,
    /// Per-pixel tanh of the texture pre-activation.
    texture: Vec<f64>,
}

impl ToyWorld {
    fn scene(&self, z: &[f64]) -> Scene {
        let tau = self.config.edge_softness;
        let radius = Self::RADIUS_BASE + Self::RADIUS_SPAN * sigmoid(z[1]);
        let coverage = self
            .distance
            .iter()
            .map(|d| sigmoid((radius - d) / tau))
            .collect();
        let zt = &z[3..3 + TEXTURE_DIMS];
        let texture = self
            .texture
            .chunks(TEXTURE_DIMS)
            .map(|row| row.iter().zip(zt).map(|(p, z)| p * z).sum::<f64>().tanh())
            .collect();
        Scene {
            background: sigmoid(z[0]),
            disk: sigmoid(z[2]),
            coverage,
            texture,
        }
    }
}

impl Generator for ToyWorld {
    fn latent_dim(&self) -> usize {
        Self::LATENT_DIM
    }

    fn image_shape(&self) -> (usize, usize) {
        (Self::SIZE, Self::SIZE)
    }

    fn generate(&self, z: &LatentVector) -> Result<Image> {
        check_dim("latent", Self::LATENT_DIM, z.dim())?;
        let s = self.scene(z.as_slice());
        let a = self.config.texture_amplitude;
        let pixels = s
            .coverage
            .iter()
            .zip(&s.texture)
            .map(|(&m, &t)| s.background * (1.0 - m) + s.disk * m + a * t)
            .collect();
        Image::new(Self::SIZE, Self::SIZE, pixels)
    }

    fn generate_vjp(&self, z: &LatentVector, upstream: &Image) -> Result<Vec<f64>> {
        check_dim("latent", Self::LATENT_DIM, z.dim())?;
        check_dim("upstream pixels", Self::SIZE * Self::SIZE, upstream.as_slice().len())?;
        let zv = z.as_slice();
        let s = self.scene(zv);
        let tau = self.config.edge_softness;
        let a = self.config.texture_amplitude;
        let (sb, sr, sc) = (sigmoid(zv[0]), sigmoid(zv[1]), sigmoid(zv[2]));
        let mut grad = vec![0.0; Self::LATENT_DIM];
        let (mut gb, mut gr, mut gc) = (0.0, 0.0, 0.0);
        for (p, &g) in upstream.as_slice().iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let m = s.coverage[p];
            gb += g * (1.0 - m);
            gc += g * m;
            // dM/dr = M(1 − M)/τ
            gr += g * (s.disk - s.background) * m * (1.0 - m) / tau;
            let t = s.texture[p];
            let gt = g * a * (1.0 - t * t);
            let row = &self.texture[p * TEXTURE_DIMS..(p + 1) * TEXTURE_DIMS];
            for (k, w) in row.iter().enumerate() {
                grad[3 + k] += gt * w;
            }
        }
        grad[0] = gb * sb * (1.0 - sb);
        grad[1] = gr * Self::RADIUS_SPAN * sr * (1.0 - sr);
        grad[2] = gc * sc * (1.0 - sc);
        Ok(grad)
    }

    fn frozen_parameters(&self) -> Vec<f64> {
        self.texture.clone()
    }
}
