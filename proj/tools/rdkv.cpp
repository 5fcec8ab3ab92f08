// rdkv: rate-distortion KV-cache compression toolkit.
//
// Subcommands: gen, calibrate, allocate, verify, sweep, dump-bits.
// Worker parallelism is capped by the RDKV_THREADS environment variable.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "rdkv/cache.hpp"
#include "rdkv/pipeline.hpp"
#include "rdkv/quantizer.hpp"
#include "rdkv/sweep.hpp"
#include "rdkv/trizone.hpp"
#include "rdkv/weights.hpp"

namespace {

using namespace rdkv;

// deterministic Box-Muller, reproducible across toolchains
class NormalSampler {
public:
    explicit NormalSampler(std::uint64_t seed) : eng_(seed) {}
    float next() {
        if (have_spare_) {
            have_spare_ = false;
            return static_cast<float>(spare_);
        }
        const double u1 = (static_cast<double>(eng_() >> 11) + 0.5) * 0x1p-53;
        const double u2 = (static_cast<double>(eng_() >> 11) + 0.5) * 0x1p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
        have_spare_ = true;
        return static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

std::vector<double> parse_grid(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << text;
}

HeadAllocation allocation_from_packed(const TriZoneCache& head) {
    HeadAllocation alloc;
    alloc.v_bits = head.v_bits;
    alloc.k_bits = head.k_bits;
    alloc.kept.kept = head.kept;
    alloc.kept.evicted = head.evicted;
    for (int t : head.kept) {
        if (alloc.v_bits[t] == 16) alloc.kept.v16.push_back(t);
    }
    return alloc;
}

struct CommonSolverFlags {
    double delta = 1e-2;
    int max_iter = 64;
    std::string bits = "0,2,4,8,16";
    bool strict_budget = false;

    SolverConfig solver() const {
        SolverConfig cfg;
        cfg.tolerance = delta;
        cfg.max_iterations = max_iter;
        cfg.strict_budget = strict_budget;
        return cfg;
    }
    BitSet bitset() const { return BitSet::parse(bits); }
};

int cmd_gen(std::uint64_t seed, const CacheShape& shape, int window, int outliers,
            double outlier_scale, const std::string& out_path) {
    const int probe = std::min(window, shape.seq_len);
    auto cache = gen_synthetic_cache(seed, shape, probe, outliers, outlier_scale);
    save_cache_file(cache, out_path);
    std::printf("wrote %s (L=%d H_q=%d H_kv=%d d=%d T=%d S_w=%d)\n", out_path.c_str(),
                shape.layers, shape.q_heads, shape.kv_heads, shape.head_dim, shape.seq_len, probe);
    return 0;
}

int cmd_calibrate(const std::vector<std::string>& cache_paths, const std::string& granularity,
                  const std::string& out_path) {
    if (cache_paths.empty()) {
        std::fprintf(stderr, "calibrate: at least one cache file required\n");
        return 2;
    }
    std::vector<KVCache> caches;
    for (const auto& p : cache_paths) caches.push_back(load_cache_file(p));
    std::vector<DistortionTable> tables;
    if (granularity == "token" || granularity == "both") {
        tables.push_back(calibrate_epsilon(caches, Granularity::token));
    }
    if (granularity == "channel" || granularity == "both") {
        tables.push_back(calibrate_epsilon(caches, Granularity::channel));
    }
    if (tables.empty()) {
        std::fprintf(stderr, "calibrate: granularity must be token, channel or both\n");
        return 2;
    }
    save_distortion_tables(tables, out_path);
    for (const auto& t : tables) {
        std::printf("%s:", t.granularity == Granularity::token ? "token" : "channel");
        for (const auto& [b, e] : t.eps) std::printf(" eps(%d)=%.6g", b, e);
        std::printf("\n");
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_allocate(const std::string& cache_path, const std::string& tables_path, int budget_tokens,
                 double rk, const CommonSolverFlags& flags, int window, int pool_kernel,
                 bool force_window_retain, const std::string& out_prefix) {
    auto cache = load_cache_file(cache_path);
    auto tables = load_distortion_tables(tables_path);
    auto eps_v = select_table(tables, Granularity::token);
    auto eps_k = select_table(tables, Granularity::channel);

    BudgetSpec spec;
    spec.n_tokens = budget_tokens;
    spec.r_k = rk;
    spec.bits = flags.bitset();
    PipelineConfig cfg;
    cfg.probe.window = window;
    cfg.probe.pool_kernel = pool_kernel;
    cfg.solver = flags.solver();
    cfg.force_window_retain = force_window_retain;

    auto alloc = allocate_model(cache, spec, eps_v, eps_k, cfg);
    auto model = build_packed_model(cache, alloc);

    const std::string alloc_path = out_prefix + ".alloc.json";
    const std::string packed_path = out_prefix + ".rdkvp";
    save_allocation(alloc, alloc_path);
    save_packed(model, packed_path);

    const auto budget = head_budget(spec, cache.shape.head_dim, cache.shape.kv_heads);
    if (budget.sub_token) {
        std::fprintf(stderr, "warning: n_tokens < kv_heads, per-head budget is fractional\n");
    }
    const double budget_total = budget.head_bits * cache.shape.layers * cache.shape.kv_heads;
    int unconverged = 0;
    for (const auto& h : alloc.heads) unconverged += (!h.v_converged || !h.k_converged) ? 1 : 0;
    std::printf("achieved %.0f bits vs budget %.0f (%+.2f%%), %d/%zu heads flagged\n",
                alloc.total_achieved_bits(), budget_total,
                100.0 * (alloc.total_achieved_bits() - budget_total) / budget_total, unconverged,
                alloc.heads.size());
    std::printf("wrote %s and %s\n", alloc_path.c_str(), packed_path.c_str());
    return 0;
}

int cmd_verify(const std::string& cache_path, const std::string& packed_path, int queries,
               std::uint64_t seed, double tol) {
    auto cache = load_cache_file(cache_path);
    auto model = load_packed(packed_path);
    if (model.shape.layers != cache.shape.layers || model.shape.kv_heads != cache.shape.kv_heads ||
        model.shape.head_dim != cache.shape.head_dim) {
        std::printf("FAIL shape: packed cache does not match the source cache\n");
        return 1;
    }

    NormalSampler rng(seed);
    double max_rel = 0.0;
    std::size_t mismatched_values = 0;
    for (int layer = 0; layer < cache.shape.layers; ++layer) {
        for (int head = 0; head < cache.shape.kv_heads; ++head) {
            const auto& packed = model.at(layer, head);
            const auto alloc = allocation_from_packed(packed);
            auto expect = reconstruct_dense(cache.k_head(layer, head), cache.v_head(layer, head),
                                            alloc);
            auto stored = materialize(packed);
            if (stored.k_hat != expect.k_hat || stored.v_hat != expect.v_hat) {
                ++mismatched_values;
            }
            if (packed.kept.empty() && packed.zone_c_len == 0) continue;
            for (int qi = 0; qi < queries; ++qi) {
                std::vector<float> q(cache.shape.head_dim);
                for (auto& x : q) x = rng.next();
                auto got = packed_decode_step(q, packed);
                auto want = dense_decode_reference(q, expect, packed.zone_c_k, packed.zone_c_v,
                                                   packed.zone_c_len);
                double diff = 0.0, norm = 0.0;
                for (std::size_t c = 0; c < got.size(); ++c) {
                    diff += (got[c] - want[c]) * (got[c] - want[c]);
                    norm += want[c] * want[c];
                }
                const double rel = std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300);
                max_rel = std::max(max_rel, rel);
            }
        }
    }
    std::printf("checked %d heads x %d queries: max rel error %.3e (tolerance %.1e)\n",
                cache.shape.layers * cache.shape.kv_heads, queries, max_rel, tol);
    if (mismatched_values > 0) {
        std::printf("FAIL payload: %zu heads disagree with direct re-quantization\n",
                    mismatched_values);
        return 1;
    }
    if (max_rel >= tol) {
        std::printf("FAIL decode: packed output deviates from the dense reference\n");
        return 1;
    }
    std::printf("PASS\n");
    return 0;
}

int cmd_sweep(const std::vector<std::string>& cache_paths, const std::string& tables_path,
              const std::string& grid_csv, const CommonSolverFlags& flags, int window,
              int pool_kernel, const std::string& out_path, const std::string& plot_path) {
    if (cache_paths.empty()) {
        std::fprintf(stderr, "sweep: at least one cache file required\n");
        return 2;
    }
    auto tables = load_distortion_tables(tables_path);
    auto eps_v = select_table(tables, Granularity::token);
    auto eps_k = select_table(tables, Granularity::channel);
    std::vector<KVCache> caches;
    for (const auto& p : cache_paths) caches.push_back(load_cache_file(p));

    ProbeConfig probe;
    probe.window = window;
    probe.pool_kernel = pool_kernel;
    auto result =
        run_sweep(caches, parse_grid(grid_csv), eps_v, eps_k, flags.bitset(), flags.solver(), probe);
    write_text(out_path, sweep_to_csv(result));
    std::printf("wrote %s (%zu rows)\n", out_path.c_str(), result.rows.size());
    if (!plot_path.empty()) {
        write_text(plot_path, sweep_to_svg(result));
        std::printf("wrote %s\n", plot_path.c_str());
    }
    return 0;
}

int cmd_dump_bits(const std::string& alloc_path, int layer, int head, const std::string& kind,
                  const std::string& out_path) {
    auto alloc = load_allocation(alloc_path);
    const WeightKind wk = kind == "channel" ? WeightKind::channel : WeightKind::token;
    auto csv = dump_bits_csv(alloc, layer, head, wk);
    write_text(out_path, csv);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rate-distortion KV-cache compression toolkit"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a deterministic synthetic cache");
    CacheShape shape{2, 8, 4, 64, 512};
    std::uint64_t seed = 0;
    int window = 32;
    int outliers = 0;
    double outlier_scale = 1.0;
    std::string out_path = "cache.rdkvc";
    gen->add_option("--seed", seed, "RNG seed");
    gen->add_option("--layers", shape.layers, "layer count")->check(CLI::PositiveNumber);
    gen->add_option("--q-heads", shape.q_heads, "query heads")->check(CLI::PositiveNumber);
    gen->add_option("--kv-heads", shape.kv_heads, "KV heads")->check(CLI::PositiveNumber);
    gen->add_option("--head-dim", shape.head_dim, "head dimension")->check(CLI::PositiveNumber);
    gen->add_option("--seq-len", shape.seq_len, "prefill length")->check(CLI::PositiveNumber);
    gen->add_option("--window", window, "observation window S_w");
    gen->add_option("--outlier-channels", outliers, "K channels to scale");
    gen->add_option("--outlier-scale", outlier_scale, "scale applied to outlier channels");
    gen->add_option("-o,--out", out_path, "output cache file");

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "estimate distortion tables eps(b)");
    std::vector<std::string> cal_caches;
    std::string granularity = "both";
    std::string cal_out = "tables.json";
    calibrate->add_option("caches", cal_caches, "cache files")->required();
    calibrate->add_option("--granularity", granularity, "token | channel | both");
    calibrate->add_option("-o,--out", cal_out, "output tables JSON");

    // allocate
    auto* allocate = app.add_subcommand("allocate", "run the allocation pipeline and pack");
    std::string alloc_cache, alloc_tables, alloc_out = "out";
    int budget_tokens = 128;
    double rk = 0.5;
    CommonSolverFlags alloc_flags;
    int pool_kernel = 5;
    bool force_window_retain = false;
    allocate->add_option("--cache", alloc_cache, "input cache")->required();
    allocate->add_option("--tables", alloc_tables, "distortion tables JSON")->required();
    allocate->add_option("--budget-tokens", budget_tokens, "FP16-equivalent tokens per layer");
    allocate->add_option("--rk", rk, "K-side budget share");
    allocate->add_option("--bits", alloc_flags.bits, "allowed bit-widths");
    allocate->add_option("--delta", alloc_flags.delta, "bisection relative tolerance");
    allocate->add_option("--max-iter", alloc_flags.max_iter, "bisection iteration cap");
    allocate->add_option("--window", window, "observation window S_w");
    allocate->add_option("--pool-kernel", pool_kernel, "token-weight pooling kernel (odd)");
    allocate->add_flag("--force-window-retain", force_window_retain,
                       "pin observation-window tokens at 16 bits");
    allocate->add_flag("--strict-budget", alloc_flags.strict_budget,
                       "repair infeasible terminal iterates");
    allocate->add_option("-o,--out", alloc_out, "output prefix (.alloc.json, .rdkvp)");

    // verify
    auto* verify = app.add_subcommand("verify", "packed decode vs dense re-quantized reference");
    std::string ver_cache, ver_packed;
    int queries = 8;
    std::uint64_t ver_seed = 0;
    double tol = 1e-5;
    verify->add_option("--cache", ver_cache, "source cache")->required();
    verify->add_option("--packed", ver_packed, "packed cache (.rdkvp)")->required();
    verify->add_option("--queries", queries, "random queries per head");
    verify->add_option("--seed", ver_seed, "query RNG seed");
    verify->add_option("--tol", tol, "relative error tolerance");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "distortion vs average bits curve with dual bounds");
    std::vector<std::string> sweep_caches;
    std::string sweep_tables, sweep_out = "sweep.csv";
    std::string grid = "1,2,4,8,16";
    CommonSolverFlags sweep_flags;
    sweep->add_option("caches", sweep_caches, "cache files (one sequence each)")->required();
    sweep->add_option("--tables", sweep_tables, "distortion tables JSON")->required();
    sweep->add_option("--grid", grid, "average bit-width grid");
    sweep->add_option("--bits", sweep_flags.bits, "allowed bit-widths (action set)");
    sweep->add_option("--delta", sweep_flags.delta, "bisection relative tolerance");
    sweep->add_option("--max-iter", sweep_flags.max_iter, "bisection iteration cap");
    sweep->add_option("--window", window, "observation window S_w");
    sweep->add_option("--pool-kernel", pool_kernel, "token-weight pooling kernel (odd)");
    sweep->add_option("-o,--out", sweep_out, "output CSV");
    std::string sweep_plot;
    sweep->add_option("--plot", sweep_plot, "also write an SVG of the curves");

    // dump-bits
    auto* dump = app.add_subcommand("dump-bits", "per-unit (index, weight, bit) CSV");
    std::string dump_alloc, dump_kind = "token", dump_out = "bits.csv";
    int dump_layer = 0, dump_head = 0;
    dump->add_option("--alloc", dump_alloc, "allocation JSON")->required();
    dump->add_option("--layer", dump_layer, "layer index");
    dump->add_option("--head", dump_head, "KV head index");
    dump->add_option("--kind", dump_kind, "token | channel");
    dump->add_option("-o,--out", dump_out, "output CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_gen(seed, shape, window, outliers, outlier_scale, out_path);
        }
        if (calibrate->parsed()) return cmd_calibrate(cal_caches, granularity, cal_out);
        if (allocate->parsed()) {
            return cmd_allocate(alloc_cache, alloc_tables, budget_tokens, rk, alloc_flags, window,
                                pool_kernel, force_window_retain, alloc_out);
        }
        if (verify->parsed()) return cmd_verify(ver_cache, ver_packed, queries, ver_seed, tol);
        if (sweep->parsed()) {
            return cmd_sweep(sweep_caches, sweep_tables, grid, sweep_flags, window, pool_kernel,
                             sweep_out, sweep_plot);
        }
        if (dump->parsed()) {
            return cmd_dump_bits(dump_alloc, dump_layer, dump_head, dump_kind, dump_out);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
