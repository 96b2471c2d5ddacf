use persona_probe::activations::{collect, default_instructions, Position, TokenPolicy};
use persona_probe::chat::{ChatMessage, Decoding};
use persona_probe::directions::{fit_all, DirectionSet, FitOptions};
use persona_probe::oracle::{ToyBackend, ToyConfig, ToyProvider};
use persona_probe::persona::{annotate_character, default_roster, AnnotateOptions, CharacterProfile};
use persona_probe::probes::{adjective_sweep, default_adjectives, SweepOptions};
use persona_probe::steering::{alpha_sweep, linear_grid, steer_generate, ForcedChoiceTask, SteeringSpec};
use persona_probe::{ActivationBackend, Trait};

fn corpus(n: usize) -> Vec<CharacterProfile> {
    let provider = ToyProvider::new(0);
    default_roster()
        .iter()
        .take(n)
        .map(|c| annotate_character(c, &provider, &AnnotateOptions::default()).unwrap())
        .collect()
}

fn fitted(backend: &ToyBackend, profiles: &[CharacterProfile]) -> DirectionSet {
    let decoding = Decoding {
        max_tokens: 4,
        ..Decoding::default()
    };
    let records = collect(backend, profiles, &[0, 1], default_instructions(), &decoding).unwrap();
    let opts = FitOptions {
        positions: vec![Position::LastInputToken, Position::MeanInput],
        ..FitOptions::default()
    };
    fit_all(&records, backend.model_id(), &opts).unwrap()
}

#[test]
fn collect_fit_probe_separates_adjectives() {
    let backend = ToyBackend::new(ToyConfig::default()).unwrap();
    let profiles = corpus(40);
    let set = fitted(&backend, &profiles);
    assert_eq!(set.entries.len(), 5 * 8 * 2);
    for adj in default_adjectives() {
        let res = adjective_sweep(&backend, &set, &adj, &default_instructions()[..2], &SweepOptions::default(), &Decoding::default()).unwrap();
        assert_eq!(res.len(), 8);
        for r in res {
            assert_eq!(r.roc.auc, 1.0, "{} layer {}", r.trait_, r.layer);
        }
    }
}

#[test]
fn steering_sweep_and_persona_override() {
    let backend = ToyBackend::new(ToyConfig::default()).unwrap();
    let profiles = corpus(40);
    let set = fitted(&backend, &profiles);
    let grid = linear_grid(-0.4, 0.4, 9).unwrap();
    let template = SteeringSpec::single(Trait::Extraversion, 0.0);
    let task = ForcedChoiceTask::extraversion();
    let res = alpha_sweep(&backend, &task, &set, &template, &grid, 2, &Decoding::default()).unwrap();
    let fp: Vec<f64> = res.outcomes.iter().map(|o| o.fraction_positive).collect();
    assert_eq!(fp[0], 0.0);
    assert_eq!(*fp.last().unwrap(), 1.0);
    assert!(fp.windows(2).all(|w| w[0] <= w[1]), "{fp:?}");
    for o in &res.outcomes {
        assert!((o.fraction_positive + o.fraction_negative + o.fraction_invalid - 1.0).abs() < 1e-12);
    }

    let extravert = profiles.iter().max_by_key(|p| p.score(Trait::Extraversion).total).unwrap();
    let introvert = profiles.iter().min_by_key(|p| p.score(Trait::Extraversion).total).unwrap();
    for (p, want) in [(extravert, 1.0), (introvert, 0.0)] {
        let task = ForcedChoiceTask::extraversion().with_persona(p.description());
        let res = alpha_sweep(&backend, &task, &set, &template, &grid, 1, &Decoding::default()).unwrap();
        assert!(res.metadata.persona);
        for o in &res.outcomes {
            assert_eq!(o.fraction_positive, want, "{} at alpha {}", p.character.name, o.alpha);
        }
    }
}

#[test]
fn zero_alpha_is_neutral_for_every_policy() {
    let backend = ToyBackend::new(ToyConfig {
        sigma: 0.2,
        ..ToyConfig::default()
    })
    .unwrap();
    let set = fitted(&backend, &corpus(20));
    let messages = vec![ChatMessage::user("Tell me about your weekend plans.")];
    let decoding = Decoding {
        max_tokens: 10,
        ..Decoding::default()
    };
    let baseline = backend.generate(&messages, &decoding).unwrap();
    for policy in [TokenPolicy::LastInputOnly, TokenPolicy::EveryGeneratedToken] {
        let mut spec = SteeringSpec::single(Trait::Extraversion, 0.0);
        spec.token_policy = policy;
        assert_eq!(steer_generate(&backend, &messages, &spec, &set, &decoding).unwrap(), baseline);
    }
}

#[test]
fn model_mismatch_is_rejected() {
    let a = ToyBackend::new(ToyConfig::default()).unwrap();
    let b = ToyBackend::new(ToyConfig {
        seed: 1,
        ..ToyConfig::default()
    })
    .unwrap();
    let set = fitted(&a, &corpus(12));
    let err = steer_generate(&b, &[ChatMessage::user("hi")], &SteeringSpec::single(Trait::Extraversion, 0.1), &set, &Decoding::default()).unwrap_err();
    assert_eq!(err.code(), "MODEL_MISMATCH");
}
