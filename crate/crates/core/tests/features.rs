use simva::features::{
    encode_video_stub, make_synthetic_dataset, render_sprite_clip, SpriteStyle, SpriteTrack, SyntheticDatasetSpec, VideoClip,
};
use simva::Tensor;

fn patch_energy(video: &simva::features::EncodedVideo, baseline: &[f64], t: usize) -> Vec<f64> {
    let (h, w) = video.grid();
    let d = video.dim();
    let f = video.patch_features.data();
    let mut cols = vec![0.0; w];
    for i in 0..h {
        for (j, col) in cols.iter_mut().enumerate() {
            let off = ((t * h + i) * w + j) * d;
            *col += f[off..off + d].iter().zip(baseline).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    cols
}

#[test]
fn blob_moving_right_shifts_energy_one_column_per_frame() {
    let style = SpriteStyle {
        background: 0.0,
        texture: 0.0,
        sigma: 2.0,
        ..SpriteStyle::default()
    };
    let track = SpriteTrack {
        start: (12.0, 4.0),
        velocity: (0.0, 1.0),
    };
    let frames = render_sprite_clip(4, (32, 32), 8, track, &style, 0);
    let clip = VideoClip::new(frames, None, "right").unwrap();
    let video = encode_video_stub(&clip, 16, 8, 7).unwrap();

    let empty = VideoClip::new(Tensor::zeros([1, 32, 32, 3]), None, "empty").unwrap();
    let base = encode_video_stub(&empty, 16, 8, 7).unwrap();
    let baseline = base.patch_features.data()[..16].to_vec();

    let argmax: Vec<usize> = (0..4)
        .map(|t| {
            let e = patch_energy(&video, &baseline, t);
            (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap()
        })
        .collect();
    assert_eq!(argmax, [0, 1, 2, 3]);
}

fn histogram(frame: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in frame {
        h[((v * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let n = frame.len() as f64;
    h.iter().map(|c| c / n).collect()
}

#[test]
fn opposite_velocities_share_pixel_statistics_but_not_trajectories() {
    let spec = SyntheticDatasetSpec {
        n_classes: 2,
        clips_per_class: 24,
        frames: 4,
        motion_profiles: vec![[0.0, 1.0], [0.0, -1.0]],
        ..SyntheticDatasetSpec::default()
    };
    let clips = make_synthetic_dataset(&spec).unwrap();
    let frame_len = 32 * 32 * 3;
    let bins = 16;
    let mut hist = vec![vec![0.0; bins]; 2];
    let mut drift = [0.0f64; 2];
    for clip in &clips {
        let c = clip.label.unwrap();
        let data = clip.frames.data();
        for t in 0..spec.frames {
            let h = histogram(&data[t * frame_len..(t + 1) * frame_len], bins);
            hist[c].iter_mut().zip(&h).for_each(|(a, b)| *a += b / (spec.clips_per_class * spec.frames) as f64);
        }
        // Horizontal shift between frames 0 and 1 that best aligns them.
        let frame = |t: usize| &data[t * frame_len..(t + 1) * frame_len];
        let err = |s: isize| -> f64 {
            let (a, b) = (frame(0), frame(1));
            let mut e = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    let xs = (x as isize + s).rem_euclid(32) as usize;
                    for k in 0..3 {
                        e += (a[(y * 32 + x) * 3 + k] - b[(y * 32 + xs) * 3 + k]).powi(2);
                    }
                }
            }
            e
        };
        let best = [-8isize, 8].into_iter().min_by(|&p, &q| err(p).total_cmp(&err(q))).unwrap();
        drift[c] += best as f64;
    }
    let tv: f64 = hist[0].iter().zip(&hist[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.02, "pixel histograms differ by total variation {tv}");
    assert!(drift[0] > 0.0 && drift[1] < 0.0, "drifts {drift:?}");
}

#[test]
fn degenerate_and_minimal_specs() {
    let tiny = SyntheticDatasetSpec {
        n_classes: 2,
        clips_per_class: 1,
        ..SyntheticDatasetSpec::default()
    };
    assert_eq!(make_synthetic_dataset(&tiny).unwrap().len(), 2);
    let empty = SyntheticDatasetSpec {
        clips_per_class: 0,
        ..tiny.clone()
    };
    assert!(make_synthetic_dataset(&empty).is_err());
    let a = make_synthetic_dataset(&tiny).unwrap();
    let b = make_synthetic_dataset(&tiny).unwrap();
    assert_eq!(a, b);
}
