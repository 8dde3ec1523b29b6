use snlds_core::data::{gen_bouncing_ball, BouncingBallConfig};
use snlds_core::eval::{align_labels, decode, Alignment};
use snlds_core::inference::InferenceConfig;
use snlds_core::model::{DiscreteInput, ModelConfig, TransitionFamily};
use snlds_core::nn::{Activation, Graph};
use snlds_core::train::{posterior_marginals, Method, Model};

fn main() {
    let ckpt = std::env::args().nth(1).expect("checkpoint path");
    let mut model = Model::new(
        ModelConfig {
            num_states: 3,
            latent_dim: 4,
            obs_dim: 1,
            transition_family: TransitionFamily::Mlp,
            discrete_input: DiscreteInput::PrevObservation,
            emission_hidden: vec![8],
            transition_hidden: vec![8],
            transition_gru_units: 4,
            discrete_hidden: vec![16],
            hidden_activation: Activation::Relu,
            init_obs_log_scale: 0.0,
            init_trans_log_scale: -2.3,
        },
        InferenceConfig { obs_dim: 1, latent_dim: 4, encoder_units: 16, causal_units: 16, state_head_hidden: vec![32] },
        Method::Marginalized,
        1,
    ).unwrap();
    model.load_weights(std::path::Path::new(&ckpt)).unwrap();
    let pid = model.store.lookup("gen.log_trans_scale").unwrap();
    let q: Vec<f64> = model.store.values(pid).iter().map(|x| (x.exp()*1000.0).round()/1000.0).collect();
    println!("sigma_Q: {q:?}");
    let pid = model.store.lookup("gen.log_obs_scale").unwrap();
    println!("sigma_R: {:?}", model.store.values(pid).iter().map(|x| (x.exp()*1000.0).round()/1000.0).collect::<Vec<_>>());
    let pid = model.store.lookup("gen.init_logits").unwrap();
    println!("pi logits: {:?}", model.store.values(pid));
    // Transition matrix at several positions.
    for xv in [0.2, 5.0, 9.8] {
        let mut g = Graph::new();
        let nodes = model.gen.bind(&mut g, &model.store);
        let x = g.row(&[xv]);
        let a = snlds_core::model::discrete_transition_matrix(&mut g, &nodes, x, 1.0).unwrap();
        let vals: Vec<f64> = g.values(a).iter().map(|v| (v*1000.0).round()/1000.0).collect();
        println!("A(x={xv}): {vals:?}");
    }

    let data = gen_bouncing_ball(555_000, 100, 6, &BouncingBallConfig::default()).unwrap();
    let mut g = Graph::new();
    for traj in &data.trajectories {
        g.clear();
        let post = posterior_marginals(&mut g, &model, traj, 1.0).unwrap();
        let dec = decode(&post.gamma1, 3);
        let labels: Vec<usize> = traj.labels.as_ref().unwrap().iter().map(|&v| v as usize).collect();
        let (aligned, _) = align_labels(&dec, &labels, Alignment::Permutation).unwrap();
        let t_cps: Vec<usize> = (1..labels.len()).filter(|&t| labels[t] != labels[t-1]).collect();
        let p_cps: Vec<usize> = (1..aligned.len()).filter(|&t| aligned[t] != aligned[t-1]).collect();
        println!("true cps {t_cps:?}");
        println!("pred cps {p_cps:?}");
    }
}
