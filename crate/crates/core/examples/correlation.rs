//! Cross-correlation between feature maps: pair layouts, the mirror symmetry
//! C_ij(s, t) = C_ji(-s, -t), and the auto-correlation peak of a delta.

use guided_deblur::tensor::{Tape, Tensor};
use guided_deblur::xcorr::{self, CorrelationSpec, PairMode};

fn main() -> guided_deblur::Result<()> {
    for mode in [PairMode::Unordered, PairMode::OrderedOffDiagonal, PairMode::Ordered] {
        println!("{mode:>16}: {} pairs for 32 channels", xcorr::pair_count(32, mode));
    }
    println!("level radii for m = 17: {:?}", (0..3).map(|l| xcorr::level_radius(17, l)).collect::<Vec<_>>());

    let spec = CorrelationSpec::new(2, 2, PairMode::Ordered);
    let x = Tensor::from_fn([1, 2, 8, 8], |i| ((i * 29 % 17) as f32 - 8.0) / 8.0);
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(x);
    let c = tape.cross_correlate(v, spec)?;
    let c = tape.value(c);
    let e = spec.extent();
    let ij = xcorr::pair_index(0, 1, 2, PairMode::Ordered)?;
    let ji = xcorr::pair_index(1, 0, 2, PairMode::Ordered)?;
    let mut worst = 0f32;
    for s in 0..e {
        for t in 0..e {
            worst = worst.max((c.at4(0, ij, s, t) - c.at4(0, ji, e - 1 - s, e - 1 - t)).abs());
        }
    }
    println!("mirror symmetry max |C_01(s,t) - C_10(-s,-t)| = {worst}");

    let mut delta = Tensor::<f32>::zeros([1, 1, 9, 9]);
    delta.data_mut()[4 * 9 + 4] = 1.0;
    let spec = CorrelationSpec::new(2, 1, PairMode::Unordered);
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(delta);
    let c = tape.cross_correlate(v, spec)?;
    for row in tape.value(c).data().chunks(spec.extent()) {
        println!("  {}", row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
