//! Runs the three GBD layer variants on random branch features and reports
//! how far each moves the features, plus the gate range.

use gbdnet::gbd::{gate_map_tensor, gate_name, init_gbd_params, BranchFeatures, GbdLayout, GbdVersion};
use gbdnet::autograd::Param;
use gbdnet::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gbdnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h0: Vec<Tensor> = (0..4)
        .map(|_| {
            let data = (0..2 * 8 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(Shape::new(2, 8, 4, 4), data)
        })
        .collect::<Result<_, _>>()?;
    let h0 = BranchFeatures::new(h0)?;
    for (version, beta) in [(GbdVersion::V1, 0.0), (GbdVersion::V1Gated, 0.0), (GbdVersion::V2, 0.0), (GbdVersion::V2, 0.1), (GbdVersion::V2, 1.0)] {
        let layout = GbdLayout { branches: 4, channels: 8, version, beta };
        let params = init_gbd_params(3, 8, layout)?;
        let h3 = params.apply(&h0)?;
        let shift: Vec<String> = h0
            .branches()
            .iter()
            .zip(h3.branches())
            .map(|(a, b)| {
                let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                format!("{d:.3}")
            })
            .collect();
        print!("{version:?} beta {beta}: max |h3 - h0| per branch {shift:?}");
        if let Some(Param::Conv(gate)) = params.store.get(&gate_name(1, 1)) {
            let g = gate_map_tensor(&h0.branches()[0], gate)?;
            let lo = g.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.data().iter().copied().fold(0.0, f64::max);
            print!(", gate range [{lo:.3}, {hi:.3}]");
        }
        println!();
    }
    Ok(())
}
