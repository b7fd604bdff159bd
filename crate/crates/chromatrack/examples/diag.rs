//! Diagnostic: teacher-forced one-step pointer accuracy on held-out clips.

use chromatrack::embednet;
use chromatrack::io::config::load_palette;
use chromatrack::numcore::Tensor;
use chromatrack::pointer::{self, LabelGrid, LabelKind, PointerConfig};
use chromatrack::synth;
use chromatrack::tracker;
use chromatrack::trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let palette_path = &args[2];
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(9000);
    let state = trainer::state_from_checkpoint(&chromatrack::io::load_checkpoint(ckpt).unwrap()).unwrap();
    let net = state.net.clone();
    let palette = load_palette(std::path::Path::new(palette_path)).unwrap();
    let g = net.grid();
    let cells = g * g;

    let mut tot_obj_ok = 0usize;
    let mut tot_obj = 0usize;
    let mut tot_bg_ok = 0usize;
    let mut tot_bg = 0usize;
    let mut color_obj_ok = 0usize;
    let mut color_obj = 0usize;

    for idx in 0..10 {
        let clip = synth::generate(&synth::clip_spec(synth::Preset::Plain, seed, idx)).unwrap();
        let gray: Vec<Vec<f32>> = clip.frames.iter().map(synth::gray_channel).collect();
        // Grid-level GT labels per frame (majority vote) and quantized colors.
        let d = clip.spec.objects.len() + 1;
        let gt_grids: Vec<Vec<usize>> = clip
            .masks
            .iter()
            .map(|m| tracker::encode_segments(m, d, net.grid_factor).unwrap().argmax())
            .collect();
        let gt_colors: Vec<Vec<u8>> = clip
            .frames
            .iter()
            .map(|f| {
                let ab = synth::ab_channels(f);
                let pooled = chromatrack::chroma::downsample_ab(&ab, 64, 64, g, g).unwrap();
                chromatrack::chroma::quantize(&pooled, g, g, &palette).indices
            })
            .collect();

        // Teacher-forced: each frame t in 3..N uses GT labels of t-3..t-1.
        for t in 3..clip.frames.len() {
            let hw = net.input_size * net.input_size;
            let mut clip_t = Tensor::zeros(&[4, net.input_size, net.input_size]);
            for (slot, f) in (t - 3..=t).enumerate() {
                clip_t.data_mut()[slot * hw..(slot + 1) * hw].copy_from_slice(&gray[f]);
            }
            let grid = embednet::forward(&state.params, &clip_t, &net).unwrap();
            let target = grid.frame(3);
            let refs = grid.frame_range(0, 3);
            let a = pointer::similarity(&target, &refs, &PointerConfig { temperature: 0.5 }).unwrap();
            let ref_labels: Vec<LabelGrid<f32>> = (t - 3..t)
                .map(|f| {
                    LabelGrid::one_hot(g, g, d, LabelKind::Segment, &gt_grids[f]).unwrap()
                })
                .collect();
            let refs_v: Vec<&LabelGrid<f32>> = ref_labels.iter().collect();
            let out = pointer::propagate(&a, &refs_v).unwrap();
            let pred = out.argmax();
            for p in 0..cells {
                if gt_grids[t][p] > 0 {
                    tot_obj += 1;
                    tot_obj_ok += (pred[p] == gt_grids[t][p]) as usize;
                } else {
                    tot_bg += 1;
                    tot_bg_ok += (pred[p] == 0) as usize;
                }
            }
            // Color, teacher-forced likewise.
            let ref_colors: Vec<LabelGrid<f32>> = (t - 3..t)
                .map(|f| {
                    let idx: Vec<usize> = gt_colors[f].iter().map(|&c| c as usize).collect();
                    LabelGrid::one_hot(g, g, palette.k(), LabelKind::Color, &idx).unwrap()
                })
                .collect();
            let refs_c: Vec<&LabelGrid<f32>> = ref_colors.iter().collect();
            let outc = pointer::propagate(&a, &refs_c).unwrap();
            let predc = outc.argmax();
            for p in 0..cells {
                if gt_grids[t][p] > 0 {
                    color_obj += 1;
                    color_obj_ok += (predc[p] as u8 == gt_colors[t][p]) as usize;
                }
            }
        }
    }
    println!(
        "teacher-forced 1-step: object-cell label acc {:.3} ({tot_obj_ok}/{tot_obj}), bg acc {:.3}, object color acc {:.3}",
        tot_obj_ok as f64 / tot_obj as f64,
        tot_bg_ok as f64 / tot_bg as f64,
        color_obj_ok as f64 / color_obj as f64
    );
}
