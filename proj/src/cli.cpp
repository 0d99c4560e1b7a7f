// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/cli.h"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <optional>
#include <thread>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "tpfp/arch_map.h"
#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"
#include "tpfp/fingerprint.h"
#include "tpfp/lineage.h"
#include "tpfp/manifest.h"
#include "tpfp/registry.h"
#include "tpfp/report.h"
#include "tpfp/synth.h"
#include "tpfp/tensor_store.h"

namespace tpfp {

namespace fs = std::filesystem;

namespace {

struct Session {
    std::vector<std::string> args;
    std::ostream& out;
    std::ostream& err;
    bool quiet = false;
    unsigned workers = 0;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::string started_at = utc_timestamp();

    unsigned effective_workers() const {
        if (workers > 0) return workers;
        return std::max(1u, std::thread::hardware_concurrency());
    }

    void warn(const std::string& msg) const {
        if (!quiet) err << "warning: " << msg << '\n';
    }
};

struct LoadedFingerprint {
    Fingerprint fp;
    fs::path path;
};

// Outputs are fully rendered before the first byte hits the disk.
void commit_outputs(const Session& s, const std::string& command, std::map<std::string, std::string> inputs,
                    const std::vector<std::pair<fs::path, std::string>>& files, const fs::path& manifest_anchor) {
    RunManifest m;
    m.command = command;
    m.arguments = s.args;
    m.tool_version = std::string(tool_version());
    m.input_hashes = std::move(inputs);
    m.started_at = s.started_at;
    for (const auto& [path, contents] : files) {
        write_file_atomic(path, contents);
        m.outputs.push_back(path.string());
    }
    m.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - s.start).count();
    write_file_atomic(manifest_path_for(manifest_anchor), render_manifest(m));
}

std::optional<fs::path> existing_registry(const std::string& flag) {
    fs::path root = flag.empty() ? default_registry_path() : fs::path(flag);
    std::error_code ec;
    if (fs::is_directory(root, ec)) return root;
    return std::nullopt;
}

LoadedFingerprint load_input(const std::string& arg, const std::string& registry_flag) {
    std::error_code ec;
    if (fs::is_regular_file(arg, ec)) return {load_fingerprint(arg), fs::path(arg)};
    if (auto root = existing_registry(registry_flag)) {
        Registry reg(*root);
        if (reg.contains(arg)) {
            for (const auto& e : reg.list()) {
                if (e.model_id == arg) return {reg.get(arg), e.file};
            }
        }
    }
    throw Error(ErrorKind::Io, fmt::format("'{}' is neither a fingerprint file nor a registry entry", arg));
}

std::map<std::string, std::string> hash_inputs(const std::vector<LoadedFingerprint>& inputs) {
    std::map<std::string, std::string> out;
    for (const auto& in : inputs) out[in.path.string()] = sha256_file(in.path);
    return out;
}

KindSet kinds_or(const std::string& text, KindSet fallback) {
    if (text.empty()) return fallback;
    return parse_kind_list(text);
}

KindSet common_kinds(const std::vector<LoadedFingerprint>& inputs) {
    KindSet out;
    if (inputs.empty()) return out;
    for (const auto& [kind, _] : inputs.front().fp.kinds) out.insert(kind);
    for (const auto& in : inputs) {
        std::erase_if(out, [&](ProjectionKind k) { return !in.fp.kinds.contains(k); });
    }
    return out;
}

const KindSet kAttn(kAttentionKinds.begin(), kAttentionKinds.end());

// --- fingerprint -------------------------------------------------------------

struct FingerprintArgs {
    std::string checkpoint;
    std::string kinds;
    std::string moe_mode = "pooled";
    std::string map_file;
    std::string model_id;
    std::string out;
    std::string registry;
    bool to_registry = false;
};

int cmd_fingerprint(Session& s, const FingerprintArgs& a) {
    const KindSet kinds = kinds_or(a.kinds, kAttn);
    auto mode = parse_moe_mode(a.moe_mode);
    if (!mode) throw Error(ErrorKind::Usage, fmt::format("unknown --moe-mode '{}'", a.moe_mode));
    if (!a.out.empty() && a.to_registry) throw Error(ErrorKind::Usage, "--out and --registry are exclusive");

    std::error_code ec;
    if (!fs::is_directory(a.checkpoint, ec)) {
        throw Error(ErrorKind::Io, fmt::format("checkpoint directory '{}' is not readable", a.checkpoint));
    }
    const auto ckpt = open_checkpoint(a.checkpoint);
    auto cfg = load_config(a.checkpoint);
    if (!a.model_id.empty()) cfg.model_id = a.model_id;
    for (const auto& w : cfg.warnings) s.warn(w);

    std::optional<RuleTable> custom;
    if (!a.map_file.empty()) custom = RuleTable::load(a.map_file);
    const RuleTable& rules = custom ? *custom : RuleTable::builtin();

    ExtractOptions opts;
    opts.moe_mode = *mode;
    opts.workers = s.effective_workers();
    const Fingerprint fp = extract_fingerprint(ckpt, cfg, kinds, opts, rules);
    const std::string doc = serialize_fingerprint(fp);

    auto inputs = checkpoint_input_hashes(ckpt);
    if (!a.map_file.empty()) inputs[a.map_file] = sha256_file(a.map_file);

    fs::path target;
    if (a.to_registry) {
        fs::path root = a.registry.empty() ? default_registry_path() : fs::path(a.registry);
        Registry reg(root);
        const auto entry = reg.add(fp);
        target = entry.file;
        commit_outputs(s, "fingerprint", std::move(inputs), {}, target);
    } else {
        target = a.out.empty() ? fs::path(fingerprint_filename(fp.model_id)) : fs::path(a.out);
        commit_outputs(s, "fingerprint", std::move(inputs), {{target, doc}}, target);
    }
    if (!s.quiet) s.err << fmt::format("wrote {} ({} layers, {} kinds)\n", target.string(), fp.num_layers, fp.kinds.size());
    return 0;
}

// --- compare -----------------------------------------------------------------

struct CompareArgs {
    std::string a;
    std::string b;
    std::string kinds;
    double t_high = Thresholds{}.high;
    double t_low = Thresholds{}.low;
    std::string format = "text";
    std::string out;
    std::string registry;
};

int cmd_compare(Session& s, const CompareArgs& a) {
    const Thresholds t{a.t_high, a.t_low};
    validate(t);
    if (a.format != "text" && a.format != "json" && a.format != "csv") {
        throw Error(ErrorKind::Usage, fmt::format("unknown --format '{}'", a.format));
    }
    const KindSet kinds = kinds_or(a.kinds, kAttn);
    std::vector<LoadedFingerprint> inputs;
    inputs.push_back(load_input(a.a, a.registry));
    inputs.push_back(load_input(a.b, a.registry));

    const auto report = compare_fingerprints(inputs[0].fp, inputs[1].fp, kinds, t);
    std::string body;
    if (a.format == "json") {
        body = render_report_json(report);
    } else if (a.format == "csv") {
        body = render_report_csv(report);
    } else {
        body = render_report_text(report);
    }
    if (a.out.empty()) {
        s.out << body;
    } else {
        commit_outputs(s, "compare", hash_inputs(inputs), {{a.out, body}}, a.out);
    }
    return 0;
}

// --- matrix ------------------------------------------------------------------

struct MatrixArgs {
    std::vector<std::string> files;
    std::string registry;
    bool from_registry = false;
    std::string kinds;
    std::string out_dir = ".";
    bool skip_errors = false;
};

int cmd_matrix(Session& s, const MatrixArgs& a) {
    const KindSet kinds = kinds_or(a.kinds, kAttn);
    std::vector<LoadedFingerprint> inputs;
    if (a.from_registry) {
        if (!a.files.empty()) throw Error(ErrorKind::Usage, "give fingerprint files or --registry, not both");
        auto root = existing_registry(a.registry);
        if (!root) throw Error(ErrorKind::Io, "registry directory does not exist");
        Registry reg(*root);
        for (const auto& e : reg.list()) inputs.push_back({reg.get(e.model_id), e.file});
    } else {
        for (const auto& f : a.files) inputs.push_back(load_input(f, a.registry));
    }
    if (inputs.size() < 2) throw Error(ErrorKind::Usage, "matrix needs at least two fingerprints");

    std::vector<Fingerprint> fps;
    for (const auto& in : inputs) fps.push_back(in.fp);
    const auto matrix = pairwise_matrix(fps, kinds, a.skip_errors, s.effective_workers());
    for (const auto& e : matrix.errors) s.warn(e);

    const fs::path dir(a.out_dir);
    std::vector<std::pair<fs::path, std::string>> files;
    for (const auto& [kind, grid] : matrix.per_kind) {
        files.emplace_back(dir / fmt::format("{}.csv", to_string(kind)), render_grid_csv(matrix.model_ids, grid));
    }
    bool any_attention = std::any_of(kinds.begin(), kinds.end(), is_attention);
    if (any_attention) files.emplace_back(dir / "overall.csv", render_grid_csv(matrix.model_ids, matrix.overall));
    files.emplace_back(dir / "matrix.json", render_matrix_json(matrix));

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, fmt::format("cannot create output directory '{}'", dir.string()));
    commit_outputs(s, "matrix", hash_inputs(inputs), files, dir);
    return 0;
}

// --- curves ------------------------------------------------------------------

struct CurvesArgs {
    std::vector<std::string> files;
    std::string kinds;
    bool normalize = true;
    std::string out;
    std::string registry;
};

int cmd_curves(Session& s, const CurvesArgs& a) {
    std::vector<LoadedFingerprint> inputs;
    for (const auto& f : a.files) inputs.push_back(load_input(f, a.registry));
    const KindSet kinds = kinds_or(a.kinds, common_kinds(inputs));
    if (kinds.empty()) throw Error(ErrorKind::KindMissing, "the inputs share no projection kind");
    std::vector<Fingerprint> fps;
    for (const auto& in : inputs) fps.push_back(in.fp);
    const std::string body = render_curves_csv(fps, kinds, a.normalize);
    if (a.out.empty()) {
        s.out << body;
    } else {
        commit_outputs(s, "curves", hash_inputs(inputs), {{a.out, body}}, a.out);
    }
    return 0;
}

// --- registry ----------------------------------------------------------------

struct RegistryArgs {
    std::string action;
    std::vector<std::string> items;
    std::string registry;
};

int cmd_registry(Session& s, const RegistryArgs& a) {
    fs::path root = a.registry.empty() ? default_registry_path() : fs::path(a.registry);
    if (a.action == "add") {
        if (a.items.empty()) throw Error(ErrorKind::Usage, "registry add needs fingerprint files");
        std::vector<LoadedFingerprint> inputs;
        for (const auto& f : a.items) inputs.push_back({load_fingerprint(f), fs::path(f)});
        Registry reg(root);
        for (const auto& in : inputs) {
            const auto entry = reg.add(in.fp);
            if (!s.quiet) s.err << fmt::format("added {} -> {}\n", entry.model_id, entry.file.string());
        }
        commit_outputs(s, "registry add", hash_inputs(inputs), {}, root);
        return 0;
    }
    if (!a.items.empty()) throw Error(ErrorKind::Usage, fmt::format("registry {} takes no extra arguments", a.action));
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw Error(ErrorKind::Io, fmt::format("registry '{}' does not exist", root.string()));
    }
    Registry reg(root);
    if (a.action == "list") {
        for (const auto& e : reg.list()) {
            std::string kinds;
            for (auto k : e.kinds) kinds += (kinds.empty() ? "" : ",") + std::string(to_string(k));
            s.out << fmt::format("{}\t{}\t{}\t{}\n", e.model_id, e.num_layers, kinds, e.content_hash);
        }
        return 0;
    }
    if (a.action == "verify") {
        const auto entries = reg.verify();
        s.out << fmt::format("ok: {} fingerprints verified\n", entries.size());
        return 0;
    }
    throw Error(ErrorKind::Usage, fmt::format("unknown registry action '{}'", a.action));
}

// --- synth -------------------------------------------------------------------

int cmd_synth(Session& s, const std::string& spec_file, const std::string& out_dir) {
    std::string text;
    try {
        text = read_file(spec_file);
    } catch (const Error& e) {
        throw Error(ErrorKind::Io, e.detail());
    }
    const SynthSpec spec = parse_synth_spec(text);
    write_synthetic_checkpoint(spec, out_dir);
    commit_outputs(s, "synth", {{spec_file, sha256_hex(text)}}, {}, fs::path(out_dir));
    if (!s.quiet) s.err << fmt::format("wrote synthetic checkpoint '{}' to {}\n", spec.model_id, out_dir);
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Session s{args, out, err};

    CLI::App app{"Weight-statistics fingerprints for transformer checkpoints", "tpfp"};
    app.set_version_flag("--version", std::string(tool_version()));
    app.add_option("--workers", s.workers, "Worker threads (0 = all cores)");
    app.add_flag("--quiet", s.quiet, "Suppress warnings and progress notes");
    app.require_subcommand(1);
    app.fallthrough();

    FingerprintArgs fa;
    auto* fp = app.add_subcommand("fingerprint", "Extract a fingerprint from a checkpoint directory");
    fp->add_option("checkpoint", fa.checkpoint, "Checkpoint directory")->required();
    fp->add_option("--kinds", fa.kinds, "Comma list of q,k,v,o,gate,up,down or attn/ffn/all");
    fp->add_option("--moe-mode", fa.moe_mode, "pooled or per-expert-mean");
    fp->add_option("--map-file", fa.map_file, "JSON tensor-name rules replacing the built-in table");
    fp->add_option("--model-id", fa.model_id, "Override the model id from config.json");
    fp->add_option("--out", fa.out, "Output fingerprint file");
    auto* fp_reg = fp->add_option("--registry", fa.registry, "Store in this registry")->expected(0, 1);

    CompareArgs ca;
    auto* cmp = app.add_subcommand("compare", "Compare two fingerprints");
    cmp->add_option("a", ca.a, "Fingerprint file or registry model id")->required();
    cmp->add_option("b", ca.b, "Fingerprint file or registry model id")->required();
    cmp->add_option("--kinds", ca.kinds);
    cmp->add_option("--t-high", ca.t_high);
    cmp->add_option("--t-low", ca.t_low);
    cmp->add_option("--format", ca.format, "text, json or csv");
    cmp->add_option("--out", ca.out);
    cmp->add_option("--registry", ca.registry);

    MatrixArgs ma;
    auto* mat = app.add_subcommand("matrix", "Pairwise correlation grids");
    mat->add_option("files", ma.files, "Fingerprint files or registry model ids");
    auto* mat_reg = mat->add_option("--registry", ma.registry, "Use every entry of this registry")->expected(0, 1);
    mat->add_option("--kinds", ma.kinds);
    mat->add_option("--out-dir", ma.out_dir);
    mat->add_flag("--skip-errors", ma.skip_errors);

    CurvesArgs cu;
    auto* cur = app.add_subcommand("curves", "Per-layer curves in long CSV form");
    cur->add_option("files", cu.files)->required();
    cur->add_option("--kinds", cu.kinds);
    cur->add_flag("--normalize,!--no-normalize", cu.normalize, "Zero-mean unit-std curves (default on)");
    cur->add_option("--out", cu.out);
    cur->add_option("--registry", cu.registry);

    RegistryArgs ra;
    auto* reg = app.add_subcommand("registry", "Manage a fingerprint registry");
    reg->add_option("action", ra.action, "add, list or verify")->required()->check(
        CLI::IsMember({"add", "list", "verify"}));
    reg->add_option("items", ra.items, "Fingerprint files for add");
    reg->add_option("--registry", ra.registry);

    std::string spec_file;
    std::string synth_out;
    auto* syn = app.add_subcommand("synth", "Write a synthetic checkpoint from a JSON spec");
    syn->add_option("spec", spec_file)->required();
    syn->add_option("out_dir", synth_out)->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : exit_code_for(ErrorKind::Usage);
    }

    try {
        if (*fp) {
            fa.to_registry = fp_reg->count() > 0;
            return cmd_fingerprint(s, fa);
        }
        if (*cmp) return cmd_compare(s, ca);
        if (*mat) {
            ma.from_registry = mat_reg->count() > 0;
            return cmd_matrix(s, ma);
        }
        if (*cur) return cmd_curves(s, cu);
        if (*reg) return cmd_registry(s, ra);
        if (*syn) return cmd_synth(s, spec_file, synth_out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: Io: " << e.what() << '\n';
        return exit_code_for(ErrorKind::Io);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(ErrorKind::Io);
    }
    return exit_code_for(ErrorKind::Usage);
}

}  // namespace tpfp
