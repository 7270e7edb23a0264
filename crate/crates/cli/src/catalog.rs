//! Configs compiled into the binary.

pub const BUNDLED: &[(&str, &str)] = &[
    ("thm1_qubit", include_str!("../configs/thm1_qubit.toml")),
    ("two_qubit_entanglement", include_str!("../configs/two_qubit_entanglement.toml")),
    ("moments_product", include_str!("../configs/moments_product.toml")),
    ("bell_channel", include_str!("../configs/bell_channel.toml")),
    ("dyson_order4", include_str!("../configs/dyson_order4.toml")),
    ("case1_quasi_periodic", include_str!("../configs/case1_quasi_periodic.toml")),
    ("case2a_coherent", include_str!("../configs/case2a_coherent.toml")),
    ("case2b_scattering", include_str!("../configs/case2b_scattering.toml")),
    ("case3a_field_coherent", include_str!("../configs/case3a_field_coherent.toml")),
    ("case3b_field_scattering", include_str!("../configs/case3b_field_scattering.toml")),
    ("field_decay", include_str!("../configs/field_decay.toml")),
    ("well_bound_states", include_str!("../configs/well_bound_states.toml")),
    ("stark_halfline", include_str!("../configs/stark_halfline.toml")),
    ("definetti_mixture", include_str!("../configs/definetti_mixture.toml")),
    ("cluster_interaction", include_str!("../configs/cluster_interaction.toml")),
    ("macroscopic", include_str!("../configs/macroscopic.toml")),
    ("interaction_sums", include_str!("../configs/interaction_sums.toml")),
    ("propagator_quality", include_str!("../configs/propagator_quality.toml")),
];

pub fn lookup(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
