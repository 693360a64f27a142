use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use slapforge_core::fixtures::{self, FixtureStore};
use slapforge_core::grid::WuStatus;
use slapforge_core::mac::{
    check_access, parse_policy, run_cross_partition_fuzz, serialize_policy, Labeling, Mode,
};
use slapforge_core::master::{self, InProcess, MasterLink};
use slapforge_core::model::{derive_partition_identity, software_install_root, Parameters, RequestedState};
use slapforge_core::node::Confinement;
use slapforge_core::profile::{
    merge_extends, parse_profile, plan, resolve, Fetch, FetchError, PlanTarget, Profile, RecipeRegistry,
};
use slapforge_core::scenario::{parse_scenario, NodeSpec, Scenario};
use slapforge_core::sim::Simulation;
use slapforge_core::wire::{decode_message, encode_line, SlapMessage, Trace};

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    /// Denied, timed out, refused: exit 1.
    Domain(anyhow::Error),
    /// Bad arguments or unparsable input: exit 2.
    Usage(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn domain(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Domain(e.into())
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

#[derive(Parser)]
#[command(name = "slapforge", version, about = "Provisioning orchestrator and desktop-grid simulator")]
struct Cli {
    /// Simulation state file used by the stateful commands.
    #[arg(long, global = true, default_value = "slapforge-state.json", env = "SLAPFORGE_STATE")]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a bundled scenario by name) and write its trace.
    Run(RunArgs),
    #[command(subcommand)]
    Node(NodeCommand),
    /// Declare that a node should install a software release.
    Supply {
        #[arg(long)]
        node: String,
        url: String,
    },
    /// Request (or update) an instance of a software release.
    Request(RequestArgs),
    /// List instances known to the master.
    Status {
        #[arg(long)]
        requester: Option<String>,
    },
    /// Cost of a user's instances over [from, to).
    Invoice {
        #[arg(long)]
        user: String,
        #[arg(long)]
        from: u64,
        #[arg(long)]
        to: u64,
    },
    #[command(subcommand)]
    Grid(GridCommand),
    #[command(subcommand)]
    Profile(ProfileCommand),
    #[command(subcommand)]
    Policy(PolicyCommand),
    #[command(subcommand)]
    Master(MasterCommand),
}

#[derive(Args)]
struct RunArgs {
    scenario: String,
    #[arg(long, default_value = "trace.log")]
    trace: PathBuf,
    #[arg(long, env = "SLAPFORGE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    ticks: Option<u64>,
    /// Also save the final simulation state.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Targeted,
    Strict,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Targeted => Mode::Targeted,
            ModeArg::Strict => Mode::Strict,
        }
    }
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Create a node's partitions and register it with the master.
    Prepare {
        #[arg(long)]
        node: String,
        #[arg(long, default_value = "")]
        credentials: String,
        #[arg(long, default_value_t = 10)]
        partitions: u32,
        #[arg(long, value_enum, default_value = "off")]
        confinement: Switch,
        #[arg(long, value_enum, default_value = "targeted")]
        mode: ModeArg,
    },
    /// One agent cycle of a node.
    Step {
        #[arg(long)]
        node: String,
        /// Append trace lines to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run every node for a number of ticks.
    Run {
        #[arg(long)]
        ticks: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print a node's state as encoded messages.
    Dump {
        #[arg(long)]
        node: String,
    },
    /// Write a node's simulated filesystem below a directory.
    Export {
        #[arg(long)]
        node: String,
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RequestArgs {
    #[arg(long)]
    requester: String,
    #[arg(long)]
    reference: String,
    #[arg(long = "type", default_value = "default")]
    instance_type: String,
    #[arg(long)]
    sla_node: Option<String>,
    /// Instance parameter as key=value; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, String)>,
    #[arg(long, value_enum, default_value = "started")]
    requested_state: StateArg,
    url: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    Started,
    Stopped,
    Destroyed,
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Subcommand)]
enum GridCommand {
    /// Work unit table of the project served by an instance.
    Status { instance: String },
    /// Add work units to an application of the project.
    Inject {
        instance: String,
        #[arg(long)]
        app: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        wu_number: u32,
    },
}

#[derive(Args)]
struct ProfileTarget {
    file: PathBuf,
    /// Resolve as an instance profile for this partition.
    #[arg(long)]
    partition: Option<u32>,
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum ProfileCommand {
    /// Parse, merge and resolve a profile.
    Lint(ProfileTarget),
    /// Print the install plan, one part per line.
    Plan(ProfileTarget),
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Parse a policy file and print its canonical form.
    Lint { file: PathBuf },
    /// Print the access decisions recorded in a trace.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        /// Re-evaluate every recorded request against this policy.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Cross-partition access fuzz against the generated policies.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        partitions: u32,
        #[arg(long, value_enum, default_value = "on")]
        confinement: Switch,
    },
}

#[derive(Subcommand)]
enum MasterCommand {
    /// Serve the master of the state file over a line-delimited socket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Stop after this many connections and save the state.
        #[arg(long)]
        connections: Option<usize>,
    },
}

/// Local paths from disk, URLs from the bundled repository.
struct CliFetch;

impl Fetch for CliFetch {
    fn fetch(&self, origin: &str) -> Result<String, FetchError> {
        if origin.contains("://") {
            FixtureStore.fetch(origin)
        } else {
            fs::read_to_string(origin).map_err(|_| FetchError(origin.to_string()))
        }
    }
}

fn load_state(path: &Path) -> Result<Simulation, Failure> {
    if !path.exists() {
        return Ok(Simulation::new(empty_scenario()));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing state {}", path.display())).map_err(usage)
}

fn save_state(path: &Path, sim: &Simulation) -> Outcome {
    let text = serde_json::to_string(sim).map_err(domain)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(domain)
}

fn empty_scenario() -> Scenario {
    parse_scenario("", "cli").expect("empty scenario parses")
}

fn append_trace(path: Option<&Path>, trace: &Trace) -> Outcome {
    let Some(path) = path else { return Ok(()) };
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(domain)?;
    file.write_all(trace.render().as_bytes()).map_err(domain)
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    let text = if path.exists() {
        fs::read_to_string(path).with_context(|| format!("reading {arg}")).map_err(usage)?
    } else if let Some(text) = fixtures::scenario(arg) {
        text.to_string()
    } else {
        return Err(usage(anyhow!("no scenario file or bundled scenario named `{arg}`")));
    };
    parse_scenario(&text, arg).map_err(usage)
}

fn cmd_run(args: RunArgs) -> Outcome {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(ticks) = args.ticks {
        scenario.ticks = ticks;
    }
    let registry = RecipeRegistry::with_builtins();
    let trace = Trace::new();
    let mut sim = Simulation::new(scenario);
    let result = sim.run(&registry, &CliFetch, &trace);
    fs::write(&args.trace, trace.render()).with_context(|| format!("writing {}", args.trace.display())).map_err(domain)?;
    if let Some(save) = &args.save {
        save_state(save, &sim)?;
    }
    let summary = result.map_err(domain)?;
    for (name, lifecycle) in &summary.requests {
        let state = lifecycle.map_or("not submitted".to_string(), |l| l.to_string());
        println!("{name:<16} {state}");
    }
    let wu = summary.work_units;
    println!("work units: {} done, {} error, {} total", wu.done, wu.error, wu.total);
    println!("denials: {}  ticks: {}  trace: {} lines", summary.denials, summary.ticks, trace.len());
    if summary.complete() {
        Ok(())
    } else {
        Err(domain(anyhow!("scenario did not complete within {} ticks", summary.ticks)))
    }
}

fn cmd_node(state: &Path, cmd: NodeCommand) -> Outcome {
    let mut sim = load_state(state)?;
    let registry = RecipeRegistry::with_builtins();
    match cmd {
        NodeCommand::Prepare { node, credentials, partitions, confinement, mode } => {
            let confinement = match confinement {
                Switch::On => Confinement::on(mode.into()),
                Switch::Off => Confinement::off(),
            };
            let spec = NodeSpec { node_id: node.clone(), credentials, partitions };
            sim.add_node(&spec, confinement, None).map_err(domain)?;
            println!("{node}: {partitions} partitions");
        }
        NodeCommand::Step { node, trace } => {
            let t = Trace::new();
            let summary = sim
                .step_node(&node, &registry, &CliFetch, Some(&t))
                .map_err(domain)?
                .ok_or_else(|| usage(anyhow!("unknown node `{node}`")))?;
            append_trace(trace.as_deref(), &t)?;
            println!("tick {}: {} tasks, {} new artifacts", sim.tick - 1, summary.tasks, summary.new_artifacts);
            for (url, status) in &summary.installs {
                println!("install {url}: {status}");
            }
            for (id, lifecycle) in &summary.deploys {
                println!("deploy {id}: {lifecycle}");
            }
            for e in &summary.errors {
                eprintln!("error: {e}");
            }
        }
        NodeCommand::Run { ticks, trace } => {
            let t = Trace::new();
            for _ in 0..ticks {
                sim.step(&registry, &CliFetch, &t).map_err(domain)?;
            }
            append_trace(trace.as_deref(), &t)?;
            println!("now at tick {}", sim.tick);
        }
        NodeCommand::Dump { node } => {
            let agent = sim.agent(&node).ok_or_else(|| usage(anyhow!("unknown node `{node}`")))?;
            for root in agent.software_roots.values() {
                let msg = SlapMessage::ReportInstall {
                    node_id: node.clone(),
                    tick: sim.tick,
                    release_url: root.url.clone(),
                    status: root.status,
                };
                println!("{}", encode_line(&msg));
            }
            let states = agent
                .instances
                .values()
                .map(|i| slapforge_core::wire::InstanceReport {
                    instance_id: i.instance_id.clone(),
                    lifecycle: i.lifecycle,
                    connection: i.connection.clone(),
                })
                .collect();
            println!("{}", encode_line(&SlapMessage::ReportState { node_id: node, tick: sim.tick, states }));
            return Ok(());
        }
        NodeCommand::Export { node, dir } => {
            let agent = sim.agent(&node).ok_or_else(|| usage(anyhow!("unknown node `{node}`")))?;
            agent.fs.export(&dir).map_err(domain)?;
            println!("{} files written below {}", agent.fs.len(), dir.display());
            return Ok(());
        }
    }
    save_state(state, &sim)
}

fn cmd_supply(state: &Path, node: String, url: String) -> Outcome {
    let mut sim = load_state(state)?;
    let reply = InProcess::new(&mut sim.master, None)
        .call(&SlapMessage::Supply { node_id: node, release_url: url })
        .map_err(domain)?;
    refused(&reply)?;
    save_state(state, &sim)
}

fn refused(reply: &SlapMessage) -> Outcome {
    match reply {
        SlapMessage::Error { code, message, .. } => Err(domain(anyhow!("refused ({code:?}): {message}"))),
        _ => Ok(()),
    }
}

fn cmd_request(state: &Path, args: RequestArgs) -> Outcome {
    let mut sim = load_state(state)?;
    let requested = match args.requested_state {
        StateArg::Started => RequestedState::Started,
        StateArg::Stopped => RequestedState::Stopped,
        StateArg::Destroyed => RequestedState::Destroyed,
    };
    let reply = InProcess::new(&mut sim.master, None)
        .call(&SlapMessage::RequestInstance {
            requester: args.requester,
            reference: args.reference,
            release_url: args.url,
            instance_type: args.instance_type,
            slapparameters: args.params.into_iter().collect(),
            sla_node: args.sla_node,
            state: requested,
        })
        .map_err(domain)?;
    refused(&reply)?;
    if let SlapMessage::InstanceStatus { instance, .. } = &reply {
        println!("{} {}", instance.instance_id, instance.lifecycle);
    }
    save_state(state, &sim)
}

fn cmd_status(state: &Path, requester: Option<String>) -> Outcome {
    let sim = load_state(state)?;
    println!("tick {}", sim.tick);
    for inst in sim.master.instances.values() {
        if requester.as_ref().is_some_and(|r| *r != inst.requester) {
            continue;
        }
        let place = inst.partition.as_ref().map_or("-".to_string(), |p| format!("{}/slappart{}", p.node_id, p.index));
        println!("{:<10} {:<10} {:<20} {:<10} {}", inst.instance_id, inst.requester, inst.reference, inst.lifecycle, place);
        for (k, v) in &inst.connection {
            println!("    {k} = {v}");
        }
    }
    for id in &sim.master.stale {
        println!("stale node: {id}");
    }
    Ok(())
}

fn cmd_invoice(state: &Path, user: &str, from: u64, to: u64) -> Outcome {
    if to < from {
        return Err(usage(anyhow!("--to must not be before --from")));
    }
    let sim = load_state(state)?;
    println!("{}", sim.master.compute_invoice(user, from, to));
    Ok(())
}

/// Node and partition root of an instance given by id or scenario request name.
fn locate(sim: &Simulation, instance: &str) -> Result<(String, String), Failure> {
    let id = sim.instance_id(instance).unwrap_or(instance);
    let inst = sim.master.instances.get(id).ok_or_else(|| usage(anyhow!("unknown instance `{instance}`")))?;
    let p = inst.partition.as_ref().ok_or_else(|| domain(anyhow!("{id} has no partition")))?;
    Ok((p.node_id.clone(), derive_partition_identity(p.index).root_path))
}

fn cmd_grid(state: &Path, cmd: GridCommand) -> Outcome {
    let mut sim = load_state(state)?;
    match cmd {
        GridCommand::Status { instance } => {
            let (node, root) = locate(&sim, &instance)?;
            let project = sim
                .agent(&node)
                .and_then(|a| a.grid.project_in(&root))
                .ok_or_else(|| domain(anyhow!("no project served by `{instance}`")))?;
            println!("{} ({})", project.project_name, project.url);
            for wu in project.wu_store.values() {
                let status = match wu.status {
                    WuStatus::Unsent => "unsent",
                    WuStatus::InProgress => "in_progress",
                    WuStatus::Done => "done",
                    WuStatus::Error => "error",
                };
                let output = project.results.get(&wu.wu_id).map_or("", |r| r.output.as_str());
                let assignee = wu.assigned_to.as_deref().unwrap_or("-");
                println!("{:<16} {:<12} {:<12} {:<16} {}", wu.wu_id, wu.app_name, status, assignee, output.trim_end());
            }
            Ok(())
        }
        GridCommand::Inject { instance, app, input, wu_number } => {
            let payload =
                fs::read_to_string(&input).with_context(|| format!("reading {}", input.display())).map_err(usage)?;
            let (node, root) = locate(&sim, &instance)?;
            let project = sim
                .agent_mut(&node)
                .and_then(|a| a.grid.project_in_mut(&root))
                .ok_or_else(|| domain(anyhow!("no project served by `{instance}`")))?;
            let ids = project.inject(&app, &payload, wu_number).map_err(domain)?;
            println!("{}", ids.join(" "));
            save_state(state, &sim)
        }
    }
}

fn load_profile(target: &ProfileTarget) -> Result<Profile, Failure> {
    let origin = target.file.to_string_lossy().to_string();
    let text = fs::read_to_string(&target.file).with_context(|| format!("reading {origin}")).map_err(usage)?;
    let parsed = parse_profile(&text, &origin).map_err(usage)?;
    let mut merged = merge_extends(parsed, &CliFetch).map_err(domain)?;
    match target.partition {
        Some(index) => {
            let id = derive_partition_identity(index);
            merged.set("slap-partition", "index", index.to_string());
            merged.set("slap-partition", "user", id.user_label.as_str());
            merged.set("slap-partition", "tap", id.tap_label.as_str());
            merged.set("slap-partition", "root", id.root_path.as_str());
            merged.set("slap-partition", "ipv6", slapforge_core::model::synthetic_ipv6(0, index));
            merged.set("slap-partition", "ipv4", slapforge_core::model::synthetic_ipv4(0, index));
            merged.set("buildout", "directory", id.root_path.as_str());
        }
        None => {
            if merged.get("buildout", "directory").is_none() {
                merged.set("buildout", "directory", software_install_root(&origin));
            }
        }
    }
    let params: Parameters = target.params.iter().cloned().collect();
    for (k, v) in &params {
        merged.set("slap-parameter", k, v.as_str());
    }
    resolve(&merged).map_err(domain)
}

fn plan_target(target: &ProfileTarget, profile: &Profile) -> PlanTarget {
    let root = profile.get("buildout", "directory").unwrap_or(".").to_string();
    match target.partition {
        Some(index) => PlanTarget::Partition { index, root },
        None => PlanTarget::Software { root },
    }
}

fn cmd_profile(cmd: ProfileCommand) -> Outcome {
    match cmd {
        ProfileCommand::Lint(target) => {
            let profile = load_profile(&target)?;
            let install_plan = plan(&profile, plan_target(&target, &profile)).map_err(domain)?;
            println!("ok: {} sections, {} parts", profile.sections.len(), install_plan.parts.len());
            Ok(())
        }
        ProfileCommand::Plan(target) => {
            let profile = load_profile(&target)?;
            let install_plan = plan(&profile, plan_target(&target, &profile)).map_err(domain)?;
            for part in install_plan.parts {
                let msg = SlapMessage::PlanPart {
                    origin: profile.origin.clone(),
                    name: part.name,
                    recipe: part.recipe,
                    options: part.options.into_iter().collect(),
                };
                println!("{}", encode_line(&msg));
            }
            Ok(())
        }
    }
}

fn cmd_policy(cmd: PolicyCommand) -> Outcome {
    match cmd {
        PolicyCommand::Lint { file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display())).map_err(usage)?;
            let policy = parse_policy(&text).map_err(usage)?;
            print!("{}", serialize_policy(&policy));
            Ok(())
        }
        PolicyCommand::Audit { trace, policy } => {
            let text = fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display())).map_err(usage)?;
            let policy = match policy {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
                    Some(parse_policy(&text).map_err(usage)?)
                }
                None => None,
            };
            let labeling = Labeling::by_rule();
            let (mut allowed, mut denied) = (0usize, 0usize);
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let msg = decode_message(line.as_bytes()).map_err(|e| usage(anyhow!("{}:{}: {e}", trace.display(), n + 1)))?;
                let SlapMessage::AccessCheck { identity, request, decision } = msg else { continue };
                let decision = match &policy {
                    Some(p) => check_access(p, &labeling, &request).decision,
                    None => decision,
                };
                if decision.is_allow() {
                    allowed += 1;
                } else {
                    denied += 1;
                }
                println!(
                    "{:>6} {identity} {} as {} {:?} {}:{} -> {decision:?}",
                    request.tick, request.subject, request.identity, request.object, request.class, request.permission
                );
            }
            println!("{allowed} allowed, {denied} denied");
            Ok(())
        }
        PolicyCommand::Fuzz { seed, n, partitions, confinement } => {
            if partitions < 2 {
                return Err(usage(anyhow!("--partitions must be at least 2")));
            }
            let outcome = run_cross_partition_fuzz(seed, n, partitions, matches!(confinement, Switch::On));
            println!("{} allowed, {} denied", outcome.allowed, outcome.denied);
            Ok(())
        }
    }
}

fn cmd_master(state: &Path, cmd: MasterCommand) -> Outcome {
    let MasterCommand::Serve { listen, connections } = cmd;
    let sim = load_state(state)?;
    let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}")).map_err(domain)?;
    eprintln!("serving on {}", listener.local_addr().map_err(domain)?);
    let shared = Arc::new(Mutex::new(sim.master.clone()));
    master::serve(shared.clone(), listener, connections).map_err(domain)?;
    let mut sim = sim;
    sim.master = shared.lock().map_err(|_| domain(anyhow!("master state poisoned")))?.clone();
    save_state(state, &sim)
}

fn dispatch(cli: Cli) -> Outcome {
    let state = cli.state;
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Node(cmd) => cmd_node(&state, cmd),
        Command::Supply { node, url } => cmd_supply(&state, node, url),
        Command::Request(args) => cmd_request(&state, args),
        Command::Status { requester } => cmd_status(&state, requester),
        Command::Invoice { user, from, to } => cmd_invoice(&state, &user, from, to),
        Command::Grid(cmd) => cmd_grid(&state, cmd),
        Command::Profile(cmd) => cmd_profile(cmd),
        Command::Policy(cmd) => cmd_policy(cmd),
        Command::Master(cmd) => cmd_master(&state, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("slapforge: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("slapforge: {e:#}");
            ExitCode::from(2)
        }
    }
}
