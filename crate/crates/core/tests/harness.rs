use colt::harness::checkpoint::MAGIC;
use colt::harness::config::ScheduleConfig;
use colt::harness::report::series;
use colt::harness::trace_csv::rows_to_string;
use colt::harness::*;
use colt::models::{Arch, Model, ModelSpec, Norm};
use colt::pruning::{prune_params, BitField, Denominator, Eligibility, Mask, MaskEntry};
use colt::tickets::{Method, Seeds, Ticket};
use colt::train::{OptimizerChoice, TrainConfig};

#[test]
fn minimal_config_gets_defaults() {
    let cfg = ExperimentConfig::parse("model.arch = conv3s\ndataset.kind = blobs\n").unwrap();
    assert_eq!(cfg.model.arch, Arch::Conv3s);
    assert_eq!(cfg.model.norm, Norm::None);
    assert_eq!(
        cfg.schedule,
        ScheduleConfig {
            p_lth: 0.2,
            p_colt: 0.15,
            target_sparsity: 89.0,
            denominator: Denominator::Eligible,
            max_rounds: 30,
            eligibility: Eligibility::ConvOnly,
            milestones: vec![],
            accuracy_target: None,
        }
    );
    assert_eq!(cfg.training, TrainConfig::default());
    assert_eq!(cfg.training.epochs, 15);
    assert_eq!(cfg.training.batch_size, 64);
    assert!(cfg.training.warmup);
    assert_eq!(cfg.training.optimizer, OptimizerChoice::Adam { beta1: 0.9, beta2: 0.999 });
    assert_eq!(cfg.training.weight_decay, 1e-4);
    assert_eq!(cfg.seeds, Seeds::all(0));
}

#[test]
fn config_errors_name_the_key() {
    let base = "model.arch = mlp\ndataset.kind = blobs\n";
    let err = ExperimentConfig::parse(&format!("{base}schedule.p_colt = 1.5\n")).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "schedule.p_colt"));
    assert!(err.to_string().contains("schedule.p_colt"));

    let err = ExperimentConfig::parse(&format!("{base}schedule.p_clot = 0.1\n")).unwrap_err();
    assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "schedule.p_clot"));

    let err = ExperimentConfig::parse("dataset.kind = blobs\n").unwrap_err();
    assert!(matches!(&err, ConfigError::Missing(k) if k == "model.arch"));

    let err = ExperimentConfig::parse(&format!("{base}model.arch = mlp\n")).unwrap_err();
    assert!(matches!(err, ConfigError::Duplicate(_)));

    let err = ExperimentConfig::parse(&format!("{base}just words\n")).unwrap_err();
    assert!(matches!(err, ConfigError::Syntax { line: 3, .. }));

    let err = ExperimentConfig::parse(
        "model.arch = mlp\ndataset.kind = idx\ndataset.train_images = /nonexistent/a\n\
         dataset.train_labels = b\ndataset.test_images = c\ndataset.test_labels = d\n",
    )
    .unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "dataset.train_images"));

    let err = ExperimentConfig::load(std::path::Path::new("/nonexistent/c.cfg")).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
}

#[test]
fn config_round_trips_through_text() {
    let text = "# a comment\n\
        experiment.name = trip\n\
        model.arch = conv3s   # trailing comment\n\
        model.norm = batch\n\
        model.widths = 4, 8, 12\n\
        dataset.kind = blobs\n\
        dataset.classes = 6\n\
        dataset.shape = 1x20x20\n\
        dataset.separation = 0.25\n\
        schedule.p_colt = 0.1\n\
        schedule.milestones = 50, 70.5\n\
        schedule.accuracy_target = 91.5\n\
        schedule.denominator = all\n\
        training.optimizer = sgd\n\
        training.momentum = 0.8\n\
        training.anneal_at = 0.5, 0.75\n\
        seeds.init = 4\nseeds.data = 5\nseeds.head = 6\n\
        output.dir = somewhere\n";
    let a = ExperimentConfig::parse(text).unwrap();
    assert_eq!(a.model.widths, vec![4, 8, 12]);
    assert_eq!(a.model.input, [1, 20, 20]);
    assert_eq!(a.training.optimizer, OptimizerChoice::Sgd { momentum: 0.8 });
    let b = ExperimentConfig::parse(&a.serialize()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.serialize(), b.serialize());
    let c = ExperimentConfig::parse("model.arch = mlp\ndataset.kind = blobs\n").unwrap();
    assert_eq!(ExperimentConfig::parse(&c.serialize()).unwrap(), c);
}

fn trained_ticket() -> Ticket {
    let spec = ModelSpec {
        widths: vec![3, 4, 5],
        ..ModelSpec::conv3s([1, 8, 8], 4)
    };
    let mut ticket = Ticket::dense(&spec, Eligibility::ConvOnly, Seeds::all(3), "blobs-test").unwrap();
    let params = Model::build(&spec, 3).unwrap().into_params();
    ticket.mask = prune_params(&params, &ticket.mask, 0.4).unwrap().mask;
    ticket.provenance.method = Method::Colt;
    ticket.provenance.rounds = 1;
    ticket
}

#[test]
fn checkpoints_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ticket = trained_ticket();
    let params = Model::build(&ModelSpec::mlp([1, 4, 4], 3), 9).unwrap().into_params();
    for (i, ck) in [
        Checkpoint::Ticket(ticket.clone()),
        Checkpoint::Params(params.clone()),
        Checkpoint::Mask(ticket.mask.clone()),
    ]
    .into_iter()
    .enumerate()
    {
        let path = dir.path().join(format!("c{i}.bin"));
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }
    let back = Checkpoint::from_bytes(&Checkpoint::Params(params.clone()).to_bytes())
        .unwrap()
        .into_params()
        .unwrap();
    for (a, b) in back.iter().zip(params.iter()) {
        let bits = |p: &colt::models::Param| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
    let t = Checkpoint::from_bytes(&Checkpoint::Ticket(ticket.clone()).to_bytes())
        .unwrap()
        .into_ticket()
        .unwrap();
    assert_eq!(t, ticket);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = Checkpoint::Ticket(trained_ticket()).to_bytes();
    for pos in [20, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Crc { .. })),
            "byte {pos}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version { found: 9 })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..8]), Err(CheckpointError::Truncated { .. })));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes).unwrap().into_mask(),
        Err(CheckpointError::WrongKind { .. })
    ));
}

#[test]
fn empty_mask_is_a_valid_file() {
    let ck = Checkpoint::Mask(Mask::new(vec![]));
    let bytes = ck.to_bytes();
    // magic, version, kind, count, crc
    assert_eq!(bytes.len(), 4 + 2 + 1 + 4 + 4);
    assert_eq!(&bytes[7..11], &0u32.to_le_bytes());
    let back = Checkpoint::from_bytes(&bytes).unwrap().into_mask().unwrap();
    assert_eq!(back.entries().len(), 0);
}

#[test]
fn mask_records_pack_bits_lsb_first() {
    let bits = [true, false, true, true, false, false, false, false, false, true];
    let mask = Mask::new(vec![MaskEntry::new("w", BitField::from_bools(&bits), true).unwrap()]);
    let bytes = Checkpoint::Mask(mask).to_bytes();
    // header 11, name len 2, name 1, tag, rank, one u64 dim, then the payload
    let payload = &bytes[11 + 2 + 1 + 1 + 1 + 8..bytes.len() - 4];
    assert_eq!(payload, &[0b0000_1101, 0b0000_0010]);
}

#[test]
fn csv_header_and_rows() {
    assert_eq!(
        CSV_HEADER,
        "method,round,sparsity_all_pct,sparsity_eligible_pct,partition1_acc_pct,partition2_acc_pct,full_acc_pct,similarity_pct,wall_s,seed"
    );
    let rows = read_rows(DEMO_TRACE.as_bytes()).unwrap();
    assert!(rows.iter().any(|r| r.method == "lth") && rows.iter().any(|r| r.method == "colt"));
    let text = rows_to_string(&rows);
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(read_rows(text.as_bytes()).unwrap(), rows);
    assert!(matches!(
        read_rows("method,round\nlth,0\n".as_bytes()),
        Err(colt::harness::trace_csv::CsvError::Header(_))
    ));
}

#[test]
fn demo_report_has_one_polyline_per_method() {
    let rows = read_rows(DEMO_TRACE.as_bytes()).unwrap();
    for chart in [Chart::AccuracyVsSparsity, Chart::SparsityVsRound] {
        let svg = render_svg(&rows, chart);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2, "{chart:?}");
        assert_eq!(svg.matches(r#"data-method="lth""#).count(), 1);
        assert_eq!(svg.matches(r#"data-method="colt""#).count(), 1);
        let s = series(&rows, chart);
        let lth_rounds = rows.iter().filter(|r| r.method == "lth").count();
        assert_eq!(s["lth"].len(), lth_rounds);
    }
}
