use snlds_core::data::{gen_bouncing_ball, BouncingBallConfig};
use snlds_core::eval::{align_labels, decode, f1_frame, f1_switch, Alignment};
use snlds_core::inference::InferenceConfig;
use snlds_core::model::{DiscreteInput, ModelConfig, TransitionFamily};
use snlds_core::nn::{Activation, Graph};
use snlds_core::train::{posterior_marginals, Method, Model};

fn main() {
    let ckpt = std::env::args().nth(1).expect("checkpoint path");
    let family = std::env::args().nth(2).unwrap_or_else(|| "gru".into());
    let mut model = Model::new(
        ModelConfig {
            num_states: 3,
            latent_dim: 4,
            obs_dim: 1,
            transition_family: if family == "mlp" { TransitionFamily::Mlp } else { TransitionFamily::Gru },
            discrete_input: DiscreteInput::PrevObservation,
            emission_hidden: vec![8],
            transition_hidden: vec![8],
            transition_gru_units: 4,
            discrete_hidden: vec![16],
            hidden_activation: Activation::Relu,
            init_obs_log_scale: 0.0,
            init_trans_log_scale: -2.3,
        },
        InferenceConfig {
            obs_dim: 1,
            latent_dim: 4,
            encoder_units: 16,
            causal_units: 16,
            state_head_hidden: vec![32],
        },
        Method::Marginalized,
        1,
    )
    .unwrap();
    model.load_weights(std::path::Path::new(&ckpt)).unwrap();

    let data = gen_bouncing_ball(555_000, 100, 50, &BouncingBallConfig::default()).unwrap();
    let mut g = Graph::new();
    let (mut f_raw, mut f_shift, mut s_raw, mut s_shift) = (0.0, 0.0, 0.0, 0.0);
    for traj in &data.trajectories {
        g.clear();
        let post = posterior_marginals(&mut g, &model, traj, 1.0).unwrap();
        let dec = decode(&post.gamma1, 3);
        let labels: Vec<usize> = traj.labels.as_ref().unwrap().iter().map(|&v| v as usize).collect();
        // Raw comparison.
        let (ar, _) = align_labels(&dec, &labels, Alignment::Permutation).unwrap();
        f_raw += f1_frame(&ar, &labels).unwrap();
        s_raw += f1_switch(&ar, &labels, 0).unwrap();
        // Labels converted to the arrival time base: truth'[t] = labels[t-1].
        let mut shifted = vec![labels[0]];
        shifted.extend_from_slice(&labels[..labels.len() - 1]);
        let (as_, _) = align_labels(&dec, &shifted, Alignment::Permutation).unwrap();
        f_shift += f1_frame(&as_, &shifted).unwrap();
        s_shift += f1_switch(&as_, &shifted, 0).unwrap();
    }
    let n = data.len() as f64;
    println!("raw:      frame {:.4} switch0 {:.4}", f_raw / n, s_raw / n);
    println!("arrival:  frame {:.4} switch0 {:.4}", f_shift / n, s_shift / n);
}
