use ucfl_core::data::{generate_federation, FederationSpec, SampleCounts, Scenario};

fn label_spec(seed: u64) -> FederationSpec {
    FederationSpec {
        num_clients: 10,
        scenario: Scenario::LabelShift,
        dirichlet_alpha: 0.4,
        num_clusters: 1,
        samples_per_client: SampleCounts::Equal(50),
        input_dim: 2,
        num_classes: 10,
        seed,
    }
}

#[test]
fn dirichlet_label_histogram_averages_to_uniform() {
    let mut totals = [0.0; 10];
    let mut clients_seen = 0.0;
    for seed in 0..500 {
        for c in generate_federation::<f64>(&label_spec(seed)).unwrap() {
            let n = c.n() as f64;
            for (k, count) in c.label_histogram(10).into_iter().enumerate() {
                totals[k] += count as f64 / n;
            }
            clients_seen += 1.0;
        }
    }
    let tv: f64 = totals
        .iter()
        .map(|t| (t / clients_seen - 0.1).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn generators_are_pure_in_spec_and_seed() {
    for scenario in [
        Scenario::LabelShift,
        Scenario::LabelAndCovariateShift,
        Scenario::ConceptShift,
    ] {
        let spec = FederationSpec {
            scenario,
            num_clusters: 4,
            ..label_spec(9)
        };
        let a = generate_federation::<f64>(&spec).unwrap();
        assert_eq!(a, generate_federation::<f64>(&spec).unwrap());
        assert_ne!(
            a,
            generate_federation::<f64>(&FederationSpec { seed: 10, ..spec }).unwrap()
        );
    }
}
