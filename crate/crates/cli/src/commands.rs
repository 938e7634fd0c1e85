use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use jetsde::brownian::GridSpec;
use jetsde::dsl::Expr;
use jetsde::io::{load_model, read_trajectories, write_trajectories, Dynamics, IoError, LoadedModel, FORMAT_VERSION};
use jetsde::jet::extract_ab;
use jetsde::manifold::{max_residual, simulate_manifold_bm};
use jetsde::model::{default_probes, pushforward_at, to_ito, to_stratonovich, vector_to_standard, JetField, ModelError, SdeModel};
use jetsde::plot::{
    glyphs, pushed_glyphs, render_ellipse_field, render_fan, render_field_of_curves, render_trajectories, AnchorGrid,
    Bounds, PlotError,
};
use jetsde::quantile::{fan_curves, mc_percentiles, PercentileSpec, QuantileError};
use jetsde::scheme::{simulate as run_scheme, ConvergenceStudy, Record, Reference, Scheme, SchemeError, SimConfig, TrajectorySet};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::{
    ConvergeArgs, Failure, FanArgs, ManifoldArgs, PlotArgs, PlotKind, ReferenceArg, SchemeArg, SimulateArgs, TargetForm,
    TransformArgs,
};

type Outcome = Result<(), Failure>;

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::model(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Eval { .. } => Failure::numerical(e),
            _ => Failure::model(e),
        }
    }
}

impl From<SchemeError> for Failure {
    fn from(e: SchemeError) -> Self {
        match e {
            SchemeError::Model(m) => m.into(),
            _ => Failure::usage(e.to_string()),
        }
    }
}

impl From<QuantileError> for Failure {
    fn from(e: QuantileError) -> Self {
        match e {
            QuantileError::Domain(_) => Failure::usage(e.to_string()),
            QuantileError::Model(m) => m.into(),
            QuantileError::Scheme(s) => s.into(),
        }
    }
}

impl From<PlotError> for Failure {
    fn from(e: PlotError) -> Self {
        match e {
            PlotError::Unsupported(_) => Failure::model(e),
            PlotError::Spec(_) => Failure::usage(e.to_string()),
            PlotError::Model(m) => m.into(),
        }
    }
}

fn io_failure(path: Option<&Path>, e: io::Error) -> Failure {
    match path {
        Some(p) => Failure::usage(format!("{}: {e}", p.display())),
        None => Failure::usage(e.to_string()),
    }
}

/// Writes through `body` to `path`, or to standard output.
fn emit(path: Option<&PathBuf>, body: impl FnOnce(&mut dyn Write) -> Result<(), Failure>) -> Outcome {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| io_failure(Some(p), e))?;
            let mut w = BufWriter::new(file);
            body(&mut w)?;
            w.flush().map_err(|e| io_failure(Some(p), e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush().map_err(|e| io_failure(None, e))
        }
    }
}

fn emit_json(path: Option<&PathBuf>, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Failure::numerical)?;
    emit(path, |w| writeln!(w, "{text}").map_err(|e| io_failure(path.map(|p| p.as_path()), e)))
}

fn emit_text(path: Option<&PathBuf>, text: &str) -> Outcome {
    emit(path, |w| w.write_all(text.as_bytes()).map_err(|e| io_failure(path.map(|p| p.as_path()), e)))
}

fn load(path: &Path) -> Result<LoadedModel, Failure> {
    load_model(path).map_err(|e| Failure::model(format!("{}: {e}", path.display())))
}

fn sde(model: &LoadedModel) -> Result<&SdeModel, Failure> {
    model
        .sde()
        .ok_or_else(|| Failure::model(format!("model `{}` has a manifold block; use the manifold subcommand", model.name)))
}

/// The model's jet field: the SDE's, or the Brownian jet of a metric.
fn field(model: &LoadedModel) -> Result<Box<dyn JetField>, Failure> {
    match &model.dynamics {
        Dynamics::Sde(m) => Ok(Box::new(m.to_jet_field()?)),
        Dynamics::Metric(g) => Ok(Box::new(g.clone())),
        Dynamics::Surface { .. } => Err(Failure::model(format!(
            "model `{}` is an implicit surface; use the manifold subcommand",
            model.name
        ))),
    }
}

fn scheme(arg: SchemeArg) -> Scheme {
    match arg {
        SchemeArg::TwoJet => Scheme::TwoJet,
        SchemeArg::Euler => Scheme::Euler,
    }
}

fn recorded(steps: usize, every: usize) -> Result<Record, Failure> {
    if every == 0 {
        return Err(Failure::usage("--every must be positive"));
    }
    let mut kept: Vec<usize> = (0..=steps).step_by(every).collect();
    if kept.last() != Some(&steps) {
        kept.push(steps);
    }
    Ok(Record::Steps(kept))
}

fn check_divergence(set: &TrajectorySet) -> Outcome {
    let diverged = set.diverged();
    if 2 * diverged > set.paths.len() {
        return Err(Failure::numerical(format!(
            "{diverged} of {} paths diverged",
            set.paths.len()
        )));
    }
    if diverged > 0 {
        eprintln!("jetsde: warning: {diverged} of {} paths diverged", set.paths.len());
    }
    Ok(())
}

fn write_set(path: Option<&PathBuf>, set: &TrajectorySet, states: &[String]) -> Outcome {
    emit(path, |w| write_trajectories(w, set, states).map_err(Failure::from))
}

fn grid(seed: u64, d: usize, horizon: f64, steps: usize) -> Result<GridSpec, Failure> {
    if !(horizon > 0.0) {
        return Err(Failure::usage(format!("horizon must be positive, got {horizon}")));
    }
    GridSpec::new(seed, d, horizon, steps).map_err(|e| Failure::usage(e.to_string()))
}

pub fn simulate(args: SimulateArgs) -> Outcome {
    let model = load(&args.model)?;
    let config = SimConfig::new(args.steps)
        .record(recorded(args.steps, args.every)?)
        .floors(model.floors.clone());
    let set = match &model.dynamics {
        Dynamics::Surface { surface, clamp } => {
            let spec = grid(args.seed, surface.dim(), args.horizon, args.steps)?;
            simulate_manifold_bm(surface, &spec, &model.x0, args.paths, &config, *clamp, &model.name)?
        }
        _ => {
            let f = field(&model)?;
            let spec = grid(args.seed, f.d(), args.horizon, args.steps)?;
            run_scheme(f.as_ref(), scheme(args.scheme), &spec, &model.x0, args.paths, &config, &model.name)?
        }
    };
    write_set(args.out.as_ref(), &set, model.symbols.states())?;
    check_divergence(&set)
}

pub fn converge(args: ConvergeArgs) -> Outcome {
    let model = load(&args.model)?;
    let f = field(&model)?;
    let reference = match (args.reference, model.closed_form) {
        (Some(ReferenceArg::FinestTwoJet), _) => Reference::FinestTwoJet,
        (Some(ReferenceArg::FinestEuler), _) => Reference::FinestEuler,
        (Some(ReferenceArg::ClosedForm) | None, Some(c)) => Reference::ClosedForm(c),
        (Some(ReferenceArg::ClosedForm), None) => {
            return Err(Failure::model(format!("model `{}` registers no closed form", model.name)))
        }
        (None, None) => Reference::FinestTwoJet,
    };
    let study = ConvergenceStudy {
        scheme: scheme(args.scheme),
        seed: args.seed,
        horizon: args.horizon,
        levels: args.levels,
        paths: args.paths,
        reference,
    };
    let report = study.run(f.as_ref(), &model.x0, &model.name)?;
    emit_json(args.out.as_ref(), &report)?;
    if 2 * report.diverged > report.paths {
        return Err(Failure::numerical(format!("{} of {} paths diverged", report.diverged, report.paths)));
    }
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn parse_map(source: &str, model: &SdeModel) -> Result<Vec<Expr>, Failure> {
    let map = source
        .split(';')
        .map(|s| Expr::parse(s.trim(), &model.symbols).map_err(|e| Failure::usage(format!("--pushforward: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if map.is_empty() {
        return Err(Failure::usage("--pushforward needs at least one component"));
    }
    Ok(map)
}

pub fn transform(args: TransformArgs) -> Outcome {
    let loaded = load(&args.model)?;
    let mut model = sde(&loaded)?.clone();
    for target in &args.to {
        model = match target {
            TargetForm::Ito => to_ito(&model)?,
            TargetForm::Stratonovich => to_stratonovich(&model)?,
            TargetForm::Standard => vector_to_standard(&model)?,
        };
    }
    let mut probes = default_probes(&loaded.x0, args.probes, args.seed);
    // points at or below a floor are outside the model's domain
    probes.retain(|(x, _)| x.iter().zip(&loaded.floors).all(|(v, f)| f.is_none_or(|f| *v > f)));
    let table = probes
        .iter()
        .map(|(x, t)| {
            let (a, b) = model.form_coefficients(x, *t)?;
            Ok(json!({ "x": x, "t": t, "drift": a, "diffusion": rows(&b) }))
        })
        .collect::<Result<Vec<Value>, Failure>>()?;
    let mut out = json!({
        "format_version": FORMAT_VERSION,
        "model": model.name,
        "form": model.form.tag(),
        "states": model.symbols.states(),
        "probes": table,
    });
    if let Some(source) = &args.pushforward {
        let map = parse_map(source, &model)?;
        let f = model.to_jet_field()?;
        let pushed = probes
            .iter()
            .map(|(x, t)| {
                let jet = pushforward_at(&f, &map, &model.symbols, x, *t)?;
                let (a, b) = extract_ab(&jet);
                Ok(json!({ "x": x, "t": t, "y": jet.value(), "drift": a, "diffusion": rows(&b) }))
            })
            .collect::<Result<Vec<Value>, Failure>>()?;
        out["pushforward"] = json!({ "map": source, "probes": pushed });
    }
    emit_json(args.out.as_ref(), &out)
}

pub fn fan(args: FanArgs) -> Outcome {
    let loaded = load(&args.model)?;
    let model = sde(&loaded)?;
    let spec = PercentileSpec {
        alphas: args.alphas.clone(),
        times: args.times.clone(),
        paths: args.paths,
        steps: args.steps,
        seed: args.seed,
        antithetic: args.antithetic,
    };
    let report = mc_percentiles(model, &spec)?;
    emit_json(args.out.as_ref(), &report)?;
    if let Some(path) = &args.curves {
        let f = model.to_jet_field()?;
        let curves = fan_curves(&f, loaded.x0[0], &args.alphas, &args.times)?;
        let mut text = format!("# format_version={FORMAT_VERSION}\nalpha,t,value\n");
        for p in &curves {
            text.push_str(&format!("{},{},{}\n", p.alpha, p.t, p.value));
        }
        emit_text(Some(path), &text)?;
    }
    if 2 * report.diverged > report.paths {
        return Err(Failure::numerical(format!("{} of {} paths diverged", report.diverged, report.paths)));
    }
    Ok(())
}

pub fn manifold(args: ManifoldArgs) -> Outcome {
    let model = load(&args.model)?;
    let config = SimConfig::new(args.steps).record(recorded(args.steps, args.every)?);
    let (set, residual) = match &model.dynamics {
        Dynamics::Surface { surface, clamp } => {
            let spec = grid(args.seed, surface.dim(), args.horizon, args.steps)?;
            let eps = args.eps.unwrap_or(*clamp);
            let set = simulate_manifold_bm(surface, &spec, &model.x0, args.paths, &config, eps, &model.name)?;
            let residual = max_residual(surface, &set).map_err(|e| Failure::from(ModelError::from(e)))?;
            (set, Some(residual))
        }
        Dynamics::Metric(g) => {
            let spec = grid(args.seed, g.d(), args.horizon, args.steps)?;
            (run_scheme(g, Scheme::TwoJet, &spec, &model.x0, args.paths, &config, &model.name)?, None)
        }
        Dynamics::Sde(_) => {
            return Err(Failure::model(format!("model `{}` has no manifold block", model.name)));
        }
    };
    write_set(args.out.as_ref(), &set, model.symbols.states())?;
    if let Some(path) = &args.summary {
        let summary = json!({
            "format_version": FORMAT_VERSION,
            "model": model.name,
            "seed": args.seed,
            "horizon": args.horizon,
            "steps": args.steps,
            "paths": args.paths,
            "diverged": set.diverged(),
            "max_abs_f": residual,
        });
        emit_json(Some(path), &summary)?;
    }
    check_divergence(&set)
}

fn anchor_grid(args: &PlotArgs) -> Result<AnchorGrid, Failure> {
    let [xmin, xmax, ymin, ymax] = args.bounds[..] else {
        return Err(Failure::usage("--bounds takes xmin,xmax,ymin,ymax"));
    };
    let (nx, ny) = match args.grid[..] {
        [n] => (n, n),
        [nx, ny] => (nx, ny),
        _ => return Err(Failure::usage("--grid takes n or nx,ny")),
    };
    Ok(AnchorGrid {
        bounds: Bounds { xmin, xmax, ymin, ymax },
        nx,
        ny,
    })
}

fn plot_model(args: &PlotArgs) -> Result<LoadedModel, Failure> {
    let path = args
        .model
        .as_ref()
        .ok_or_else(|| Failure::usage("this plot kind needs --model"))?;
    load(path)
}

pub fn plot(args: PlotArgs) -> Outcome {
    let svg = match args.kind {
        PlotKind::FieldOfCurves | PlotKind::EllipseField => {
            let curves = args.kind == PlotKind::FieldOfCurves;
            let eps = args.eps.unwrap_or(if curves { 0.1 } else { 0.05 });
            if !(eps > 0.0) {
                return Err(Failure::usage(format!("--eps must be positive, got {eps}")));
            }
            let model = plot_model(&args)?;
            let f = field(&model)?;
            let grid = anchor_grid(&args)?;
            let (glyphs, labels) = match &args.pushforward {
                Some(source) => {
                    let m = sde(&model)?;
                    let map = parse_map(source, m)?;
                    (
                        pushed_glyphs(f.as_ref(), &map, &model.symbols, &grid, 0.0)?,
                        ["y1".to_string(), "y2".to_string()],
                    )
                }
                None => {
                    let s = model.symbols.states();
                    let labels = match s {
                        [a, b] => [a.clone(), b.clone()],
                        _ => ["x1".to_string(), "x2".to_string()],
                    };
                    (glyphs(f.as_ref(), &grid, 0.0)?, labels)
                }
            };
            let title = args.title.clone().unwrap_or_else(|| model.name.clone());
            let labels = [labels[0].as_str(), labels[1].as_str()];
            if curves {
                render_field_of_curves(&glyphs, eps, &title, labels)?
            } else {
                render_ellipse_field(&glyphs, eps, &title, labels)?
            }
        }
        PlotKind::Fan => {
            let loaded = plot_model(&args)?;
            let model = sde(&loaded)?;
            if !(args.horizon > 0.0) {
                return Err(Failure::usage("--horizon must be positive"));
            }
            let times: Vec<f64> = (0..=64).map(|k| args.horizon * k as f64 / 64.0).collect();
            let f = model.to_jet_field()?;
            let curves = fan_curves(&f, loaded.x0[0], &args.alphas, &times)?;
            let report = if args.paths > 0 {
                let quarter: Vec<f64> = (1..=4).map(|k| args.horizon * k as f64 / 4.0).collect();
                let spec = PercentileSpec {
                    alphas: args.alphas.clone(),
                    times: quarter,
                    paths: args.paths,
                    steps: 64,
                    seed: args.seed,
                    antithetic: false,
                };
                Some(mc_percentiles(model, &spec)?)
            } else {
                None
            };
            let title = args.title.clone().unwrap_or_else(|| loaded.name.clone());
            render_fan(&curves, report.as_ref(), &title, &loaded.symbols.states()[0])?
        }
        PlotKind::Trajectory => {
            let path = args
                .csv
                .as_ref()
                .ok_or_else(|| Failure::usage("trajectory plots need --csv"))?;
            let file = File::open(path).map_err(|e| io_failure(Some(path), e))?;
            let table = read_trajectories(&mut BufReader::new(file))?;
            let title = args
                .title
                .clone()
                .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            render_trajectories(&table, args.max_paths, &title)?
        }
    };
    emit_text(args.out.as_ref(), &svg)
}
