//! `sgk`: Glauber-Kawasaki dynamics and reaction-diffusion solving on the
//! Sierpinski gasket.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sierpinski_gk::calculus::{effective_resistance, harmonic_extension, SiteFunction};
use sierpinski_gk::gasket::GasketGraph;
use sierpinski_gk::harness::{
    self, default_test_set, parse_profile, ExperimentConfig,
};
use sierpinski_gk::kmc::{init_config, parallel_replicas, run, SeriesObserver, SimEnv, SimParams};
use sierpinski_gk::pde::{solve, stable_dt, BoundaryCondition};
use sierpinski_gk::rates::{phi_polynomial, RateFamily};
use sierpinski_gk::Error;

#[derive(Parser)]
#[command(name = "sgk", version, about = "Glauber-Kawasaki dynamics on the Sierpinski gasket")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Graph utilities.
    Gasket {
        #[command(subcommand)]
        command: GasketCmd,
    },
    /// Rate-family utilities.
    Rates {
        #[command(subcommand)]
        command: RatesCmd,
    },
    /// Monte Carlo simulation of the particle system.
    Simulate(SimulateArgs),
    /// Solve the limiting reaction-diffusion equation.
    Solve(SolveArgs),
    /// Discrete-calculus utilities.
    Calculus {
        #[command(subcommand)]
        command: CalculusCmd,
    },
    /// Seeded experiments confronting simulator and solver.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCmd,
    },
    /// Render a CSV column pair as a static SVG polyline.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum GasketCmd {
    /// Write the site table and edge list of `G_N`.
    Dump {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RatesCmd {
    /// Tabulate the reaction function `Phi(rho)` on a grid.
    Phi {
        #[command(flatten)]
        family: FamilyArgs,
        /// Neighborhood range of the family.
        #[arg(long, default_value_t = 1)]
        l0: u32,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct FamilyArgs {
    /// Rate family: constant | dfl | ising | none.
    #[arg(long, default_value = "constant")]
    family: String,
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    #[arg(long, default_value_t = 0.4)]
    gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
}

impl FamilyArgs {
    fn build(&self) -> Result<Option<RateFamily>, Error> {
        match self.family.as_str() {
            "constant" => Ok(Some(RateFamily::Constant { c0: self.c0 })),
            "dfl" => Ok(Some(RateFamily::Dfl { gamma: self.gamma })),
            "ising" => Ok(Some(RateFamily::Ising { beta: self.beta })),
            "none" => Ok(None),
            other => Err(Error::Config(format!("unknown rate family `{other}`"))),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    level: u32,
    /// Boundary scale; omit for no reservoirs.
    #[arg(long)]
    b: Option<f64>,
    #[command(flatten)]
    family: FamilyArgs,
    /// Reservoir birth rates `a0,a1,a2`.
    #[arg(long, default_value = "1,1,1", value_parser = parse_triple)]
    lambda_plus: Triple,
    #[arg(long, default_value = "1,1,1", value_parser = parse_triple)]
    lambda_minus: Triple,
    /// Initial profile: const:v | harmonic:a,b,c | x | y.
    #[arg(long, default_value = "const:0.5")]
    rho0: String,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 11)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    replicas: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for CSVs and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    level: u32,
    /// Boundary regime: dirichlet | robin | neumann.
    #[arg(long, default_value = "dirichlet")]
    bc: String,
    /// Boundary datum `rho_B` per corner.
    #[arg(long = "rhoB", default_value = "0.5,0.5,0.5", value_parser = parse_triple)]
    rho_b: Triple,
    /// Robin coefficients per corner.
    #[arg(long, default_value = "0,0,0", value_parser = parse_triple)]
    robin_r: Triple,
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value = "const:0.5")]
    rho0: String,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    /// Time step; defaults to the stability bound.
    #[arg(long)]
    dt: Option<f64>,
    /// Store stride over the time grid.
    #[arg(long, default_value_t = 100)]
    stride: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CalculusCmd {
    /// Corner-to-corner effective resistance of the full gasket.
    Resist {
        #[arg(long)]
        level: u32,
    },
    /// Harmonic extension of corner data to a level, written as
    /// `site_id,value`.
    Extend {
        #[arg(long, value_parser = parse_triple)]
        corners: Triple,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run a JSON-configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero if the experiment's acceptance assertion fails.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Column name for the x axis.
    #[arg(long)]
    x: String,
    /// Column name for the y axis.
    #[arg(long)]
    y: String,
    #[arg(long)]
    out: PathBuf,
}

type Triple = [f64; 3];

fn parse_triple(s: &str) -> Result<Triple, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad number `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected 3 comma-separated values, got `{s}`"))
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

fn write_out(path: Option<&Path>, content: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Gasket { command: GasketCmd::Dump { level, out } } => {
            let g = GasketGraph::build(level)?;
            let mut buf = Vec::new();
            g.dump(&mut buf)?;
            write_out(out.as_deref(), &String::from_utf8_lossy(&buf))?;
            Ok(0)
        }
        Command::Rates { command: RatesCmd::Phi { family, l0, grid, out } } => {
            let family = family
                .build()?
                .ok_or_else(|| Error::Config("`rates phi` needs an actual family".into()))?;
            let level = (l0 + 2).max(4);
            let catalog = GasketGraph::build(level)?.shape_catalog(l0)?;
            let phi = phi_polynomial(&family, &catalog)?;
            let mut csv = String::from("rho,phi\n");
            for i in 0..grid.max(2) {
                let rho = i as f64 / (grid.max(2) - 1) as f64;
                csv.push_str(&format!("{rho},{}\n", phi.eval(rho)));
            }
            write_out(out.as_deref(), &csv)?;
            Ok(0)
        }
        Command::Simulate(args) => simulate(args),
        Command::Solve(args) => solve_cmd(args),
        Command::Calculus { command } => match command {
            CalculusCmd::Resist { level } => {
                let g = GasketGraph::build(level)?;
                let all: Vec<usize> = (0..g.num_sites()).collect();
                let [a0, _, a2] = g.boundary();
                let r = effective_resistance(&g, &all, a0, a2)?;
                println!("{r}");
                Ok(0)
            }
            CalculusCmd::Extend { corners, level, out } => {
                let g0 = GasketGraph::build(0)?;
                let mut data = SiteFunction::constant(&g0, 0.0);
                for (i, &a) in g0.boundary().iter().enumerate() {
                    data.values[a] = corners[i];
                }
                let ext = harmonic_extension(&data, level)?;
                let mut csv = String::from("site_id,value\n");
                for (s, v) in ext.values.iter().enumerate() {
                    csv.push_str(&format!("{s},{v}\n"));
                }
                write_out(out.as_deref(), &csv)?;
                Ok(0)
            }
        },
        Command::Experiment { command: ExperimentCmd::Run { config, out, check } } => {
            let text = fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let start = Instant::now();
            let outcome = harness::run_experiment(&cfg)?;
            let wall = start.elapsed().as_secs_f64();
            let manifest = harness::manifest_for(&cfg, &outcome, wall);
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                for (name, content) in &outcome.csv {
                    fs::write(dir.join(name), content)?;
                }
                fs::write(
                    dir.join("manifest.json"),
                    serde_json::to_string_pretty(&manifest)
                        .expect("serializable manifest"),
                )?;
            }
            println!("{}", outcome.summary);
            if check && !outcome.passed {
                eprintln!("experiment check failed");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Plot(args) => plot(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<i32, Error> {
    let params = SimParams {
        level: args.level,
        b: args.b.unwrap_or(f64::INFINITY),
        lambda_plus: args.lambda_plus,
        lambda_minus: args.lambda_minus,
        family: args.family.build()?,
        range: 1,
        t_end: args.t,
        seed: args.seed,
    };
    let start = Instant::now();
    let env = SimEnv::new(params)?;
    let g = env.graph();
    let rho0 = parse_profile(&args.rho0, g)?;
    let sample_times: Vec<f64> = (0..args.samples.max(2))
        .map(|i| args.t * i as f64 / (args.samples.max(2) - 1) as f64)
        .collect();
    // Skip test functions that do not exist at this level (the sharpness-2
    // cell bumps need level >= 3).
    let mut functions: Vec<(String, Vec<f64>)> = Vec::new();
    for tf in default_test_set() {
        match tf.values(g) {
            Ok(values) => functions.push((tf.name(), values)),
            Err(_) => eprintln!("skipping observable {} at level {}", tf.name(), args.level),
        }
    }
    let results = parallel_replicas(args.replicas, |i| {
        let mut cfg = init_config(&env, &rho0, args.seed + i as u64)?;
        let mut obs = SeriesObserver::new(&env, functions.clone(), Vec::new())?;
        let stats = run(&env, &mut cfg, args.seed + i as u64, &sample_times, &mut [&mut obs])?;
        Ok((obs.rows, stats))
    })?;
    let events: u64 = results.iter().map(|(_, s)| s.events).sum();

    fs::create_dir_all(&args.out)?;
    // One CSV per observable: replica-resolved empirical averages.
    for (fi, (name, _)) in functions.iter().enumerate() {
        let mut csv = String::from("replica,t,value\n");
        for (ri, (rows, _)) in results.iter().enumerate() {
            for row in rows {
                csv.push_str(&format!("{ri},{},{}\n", row.t, row.values[fi]));
            }
        }
        fs::write(args.out.join(format!("pi_{name}.csv")), csv)?;
    }
    let mut csv = String::from("replica,t,eta_a0,eta_a1,eta_a2\n");
    for (ri, (rows, _)) in results.iter().enumerate() {
        for row in rows {
            csv.push_str(&format!(
                "{ri},{},{},{},{}\n",
                row.t, row.boundary[0], row.boundary[1], row.boundary[2]
            ));
        }
    }
    fs::write(args.out.join("boundary.csv"), csv)?;

    let manifest = serde_json::json!({
        "command": "simulate",
        "level": args.level,
        "b": args.b,
        "family": args.family.build()?,
        "lambda_plus": args.lambda_plus,
        "lambda_minus": args.lambda_minus,
        "rho0": args.rho0,
        "t_end": args.t,
        "replicas": args.replicas,
        "seed": args.seed,
        "binary_version": harness::binary_version(),
        "wall_seconds": start.elapsed().as_secs_f64(),
        "events": events,
    });
    let mut f = fs::File::create(args.out.join("manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    println!("simulated {} replicas, {events} events", args.replicas);
    Ok(0)
}

fn solve_cmd(args: SolveArgs) -> Result<i32, Error> {
    let g = GasketGraph::build(args.level)?;
    let bc = match args.bc.as_str() {
        "dirichlet" => BoundaryCondition::dirichlet(args.rho_b),
        "robin" => BoundaryCondition::robin(args.rho_b, args.robin_r)?,
        "neumann" => BoundaryCondition::neumann(args.rho_b),
        other => return Err(Error::Config(format!("unknown boundary regime `{other}`"))),
    };
    let phi = harness::reaction_fn(&args.family.build()?, 1)?;
    let rho0 = parse_profile(&args.rho0, &g)?;
    let dt = args.dt.unwrap_or_else(|| stable_dt(args.level, &phi));
    let traj = solve(&g, &bc, &phi, &rho0, args.t, dt, args.stride)?;
    let mut csv = String::from("t,site_id,rho\n");
    for field in &traj.fields {
        for (s, v) in field.values.iter().enumerate() {
            csv.push_str(&format!("{},{s},{v}\n", field.time));
        }
    }
    write_out(args.out.as_deref(), &csv)?;
    Ok(0)
}

fn plot(args: PlotArgs) -> Result<i32, Error> {
    let text = fs::read_to_string(&args.csv)?;
    let mut lines = text.lines();
    let header: Vec<&str> =
        lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?.split(',').collect();
    let xi = header
        .iter()
        .position(|&h| h == args.x)
        .ok_or_else(|| Error::Config(format!("no column `{}`", args.x)))?;
    let yi = header
        .iter()
        .position(|&h| h == args.y)
        .ok_or_else(|| Error::Config(format!("no column `{}`", args.y)))?;
    let mut points = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() <= xi.max(yi) {
            continue;
        }
        if let (Ok(x), Ok(y)) = (cells[xi].parse::<f64>(), cells[yi].parse::<f64>()) {
            points.push((x, y));
        }
    }
    if points.is_empty() {
        return Err(Error::Config("no numeric points to plot".into()));
    }
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x values"));
    let (w, h, margin) = (640.0, 420.0, 50.0);
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (ymin, ymax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    let xspan = (xmax - xmin).max(f64::MIN_POSITIVE);
    let yspan = (ymax - ymin).max(f64::MIN_POSITIVE);
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            let px = margin + (x - xmin) / xspan * (w - 2.0 * margin);
            let py = h - margin - (y - ymin) / yspan * (h - 2.0 * margin);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{hm}\" x2=\"{wm}\" y2=\"{hm}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{hm}\" stroke=\"black\"/>\n",
            "<text x=\"{wmid}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"12\">{xl}</text>\n",
            "<text x=\"14\" y=\"{hmid}\" text-anchor=\"middle\" font-size=\"12\" ",
            "transform=\"rotate(-90 14 {hmid})\">{yl}</text>\n",
            "<text x=\"{m}\" y=\"{hb}\" font-size=\"10\">{x0:.3}</text>\n",
            "<text x=\"{wm}\" y=\"{hb}\" text-anchor=\"end\" font-size=\"10\">{x1:.3}</text>\n",
            "<text x=\"{mt}\" y=\"{hm}\" text-anchor=\"end\" font-size=\"10\">{y0:.3}</text>\n",
            "<text x=\"{mt}\" y=\"{m}\" text-anchor=\"end\" font-size=\"10\">{y1:.3}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = margin,
        mt = margin - 4.0,
        wm = w - margin,
        hm = h - margin,
        hb = h - margin + 14.0,
        wmid = w / 2.0,
        hmid = h / 2.0,
        h2 = h - 12.0,
        xl = args.x,
        yl = args.y,
        x0 = xmin,
        x1 = xmax,
        y0 = ymin,
        y1 = ymax,
        pts = path.join(" ")
    );
    fs::write(&args.out, svg)?;
    Ok(0)
}
