#include "stgncde/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace stgncde {

ModelVariant parse_variant(const std::string& name) {
    if (name == "full") return ModelVariant::full;
    if (name == "temporal_only") return ModelVariant::temporal_only;
    if (name == "spatial_only") return ModelVariant::spatial_only;
    throw std::invalid_argument("unknown variant '" + name +
                                "' (expected full, temporal_only or spatial_only)");
}

std::string variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::full: return "full";
        case ModelVariant::temporal_only: return "temporal_only";
        case ModelVariant::spatial_only: return "spatial_only";
    }
    return "full";
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw std::invalid_argument(std::string("ModelConfig: ") + what + " must be positive");
    };
    positive(num_nodes, "num_nodes");
    positive(input_dim, "input_dim");
    positive(hidden_dim, "hidden_dim");
    positive(state_dim, "state_dim");
    positive(embed_dim, "embed_dim");
    positive(k_layers, "k_layers");
    positive(horizon, "horizon");
    positive(output_dim, "output_dim");
}

Tensor affine(const Tensor& x, const Fc& fc) { return linear(x, fc.w, fc.b); }

namespace {

bool has_temporal(ModelVariant v) { return v != ModelVariant::spatial_only; }
bool has_spatial(ModelVariant v) { return v != ModelVariant::temporal_only; }

double next_uniform(std::mt19937_64& rng) {
    // 53-bit mantissa draw in [0, 1); independent of library distributions so
    // runs reproduce across standard libraries.
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Tensor uniform_tensor(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.raw()) v = lo + (hi - lo) * next_uniform(rng);
    return t;
}

Fc make_fc(int in, int out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return Fc{uniform_tensor({in, out}, -bound, bound, rng), uniform_tensor({out}, -bound, bound, rng)};
}

void push_fc(std::vector<std::pair<std::string, Tensor*>>& list, const std::string& name, Fc& fc) {
    if (!fc.w.defined()) return;
    list.emplace_back(name + ".w", &fc.w);
    list.emplace_back(name + ".b", &fc.b);
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
    std::vector<std::pair<std::string, Tensor*>> list;
    for (std::size_t i = 0; i < f_hidden.size(); ++i) push_fc(list, "f." + std::to_string(i), f_hidden[i]);
    push_fc(list, "f.out", f_out);
    push_fc(list, "g.in", g_in);
    if (w_spatial.defined()) list.emplace_back("g.w_spatial", &w_spatial);
    push_fc(list, "g.out", g_out);
    if (embed.defined()) list.emplace_back("embed", &embed);
    push_fc(list, "h0", h0);
    push_fc(list, "z0", z0);
    push_fc(list, "out", out);
    return list;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
    std::vector<std::pair<std::string, const Tensor*>> list;
    for (auto& [name, t] : const_cast<ModelParams*>(this)->named()) list.emplace_back(name, t);
    return list;
}

ModelParams ModelParams::clone() const {
    ModelParams c;
    auto copy_fc = [](const Fc& fc) {
        return fc.w.defined() ? Fc{fc.w.clone(), fc.b.clone()} : Fc{};
    };
    for (const auto& fc : f_hidden) c.f_hidden.push_back(copy_fc(fc));
    c.f_out = copy_fc(f_out);
    c.g_in = copy_fc(g_in);
    if (w_spatial.defined()) c.w_spatial = w_spatial.clone();
    c.g_out = copy_fc(g_out);
    if (embed.defined()) c.embed = embed.clone();
    c.h0 = copy_fc(h0);
    c.z0 = copy_fc(z0);
    c.out = copy_fc(out);
    return c;
}

void ModelParams::set_requires_grad() {
    for (auto& [name, t] : named()) t->set_requires_grad(true);
}

Tensor temporal_cde_func(const Tensor& h, const ModelParams& params) {
    Tensor a = h;
    for (const auto& fc : params.f_hidden) a = relu(affine(a, fc));
    return tanh(affine(a, params.f_out));
}

Tensor normalized_adaptive_adjacency(const Tensor& embed) {
    Tensor scores = relu(matmul(embed, transpose(embed)));
    return add(Tensor::identity(embed.rows()), softmax_rows(scores));
}

Tensor spatial_cde_func(const Tensor& z, const ModelParams& params, const Tensor& adj) {
    Tensor b0 = relu(affine(z, params.g_in));
    Tensor b1 = matmul(graph_mix(adj, b0), params.w_spatial);
    return tanh(affine(b1, params.g_out));
}

AugmentedState initial_values(const Tensor& x0, const ModelParams& params, ModelVariant variant) {
    AugmentedState s;
    Tensor h0 = affine(x0, params.h0);
    if (has_temporal(variant)) s.h = h0;
    if (has_spatial(variant)) s.z = affine(h0, params.z0);
    return s;
}

namespace {

// Shared by the single-window op and the batched forward; xdot stacks one or
// more windows on the node axis.
AugmentedState eval_field(const Tensor& xdot, const AugmentedState& state, const ModelParams& params,
                          const ModelConfig& cfg, const Tensor& adj) {
    AugmentedState d;
    switch (cfg.variant) {
        case ModelVariant::full: {
            d.h = rowwise_matvec(temporal_cde_func(state.h, params), xdot, cfg.hidden_dim);
            d.z = rowwise_matvec(spatial_cde_func(state.z, params, adj), d.h, cfg.state_dim);
            break;
        }
        case ModelVariant::temporal_only: {
            d.h = rowwise_matvec(temporal_cde_func(state.h, params), xdot, cfg.hidden_dim);
            break;
        }
        case ModelVariant::spatial_only: {
            d.z = rowwise_matvec(spatial_cde_func(state.z, params, adj), xdot, cfg.state_dim);
            break;
        }
    }
    return d;
}

OdeState to_ode_state(const AugmentedState& s, ModelVariant v) {
    OdeState out;
    if (has_temporal(v)) out.push_back(s.h);
    if (has_spatial(v)) out.push_back(s.z);
    return out;
}

AugmentedState from_ode_state(const OdeState& s, ModelVariant v) {
    AugmentedState out;
    std::size_t i = 0;
    if (has_temporal(v)) out.h = s[i++];
    if (has_spatial(v)) out.z = s[i++];
    return out;
}

void check_time_domain(double t, double t_end) {
    if (t < -1e-9 || t > t_end + 1e-9) {
        throw std::domain_error("vector_field: t = " + std::to_string(t) + " outside [0, " +
                                std::to_string(t_end) + "]");
    }
}

// Stacks dX/dt of all windows at time t, appending the constant time
// derivative when the control carries the time channel.
Tensor stack_control_derivative(std::span<const ControlPath* const> paths, double t,
                                const ModelConfig& cfg) {
    const int v = cfg.num_nodes, d = cfg.input_dim, dc = cfg.control_dim();
    const int rows = static_cast<int>(paths.size()) * v;
    Tensor xdot = Tensor::zeros({rows, dc});
    double* out = xdot.raw().data();
    if (!cfg.time_channel) {
        for (const ControlPath* p : paths) {
            p->eval_derivative_into(t, out);
            out += static_cast<std::size_t>(v) * d;
        }
        return xdot;
    }
    std::vector<double> tmp(static_cast<std::size_t>(v) * d);
    for (const ControlPath* p : paths) {
        p->eval_derivative_into(t, tmp.data());
        for (int node = 0; node < v; ++node) {
            for (int c = 0; c < d; ++c) out[c] = tmp[static_cast<std::size_t>(node) * d + c];
            out[d] = 1.0;
            out += dc;
        }
    }
    return xdot;
}

}  // namespace

AugmentedState vector_field(double t, const AugmentedState& state, const ControlPath& path,
                            const ModelParams& params, const ModelConfig& cfg) {
    check_time_domain(t, path.t_end());
    Tensor adj;
    if (has_spatial(cfg.variant)) adj = normalized_adaptive_adjacency(params.embed);
    const ControlPath* one[] = {&path};
    return eval_field(stack_control_derivative({one, 1}, t, cfg), state, params, cfg, adj);
}

Tensor output_layer(const Tensor& z_final, const ModelParams& params) {
    return affine(z_final, params.out);
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int dc = cfg_.control_dim(), dh = cfg_.hidden_dim, dz = cfg_.state_dim;
    if (has_temporal(cfg_.variant)) {
        for (int i = 0; i <= cfg_.k_layers; ++i) params_.f_hidden.push_back(make_fc(dh, dh, rng));
        params_.f_out = make_fc(dh, dh * dc, rng);
    }
    if (has_spatial(cfg_.variant)) {
        params_.g_in = make_fc(dz, dz, rng);
        const double bound = 1.0 / std::sqrt(static_cast<double>(dz));
        params_.w_spatial = uniform_tensor({dz, dz}, -bound, bound, rng);
        const int g_head = cfg_.variant == ModelVariant::spatial_only ? dz * dc : dz * dh;
        params_.g_out = make_fc(dz, g_head, rng);
        params_.embed = uniform_tensor({cfg_.num_nodes, cfg_.embed_dim}, -0.1, 0.1, rng);
    }
    params_.h0 = make_fc(cfg_.input_dim, dh, rng);
    if (has_spatial(cfg_.variant)) params_.z0 = make_fc(dh, dz, rng);
    params_.out = make_fc(cfg_.readout_dim(), cfg_.horizon * cfg_.output_dim, rng);
    params_.set_requires_grad();
}

Model::Model(ModelConfig cfg, ModelParams params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    params_.set_requires_grad();
}

Tensor Model::forward(const ControlPath& path, const SolverConfig& solver) const {
    const ControlPath* one[] = {&path};
    return forward(std::span<const ControlPath* const>(one, 1), solver);
}

Tensor Model::forward(std::span<const ControlPath* const> paths, const SolverConfig& solver) const {
    if (paths.empty()) throw std::invalid_argument("forward: no windows");
    const int v = cfg_.num_nodes, d = cfg_.input_dim;
    const int t_len = paths.front()->window_len();
    for (const ControlPath* p : paths) {
        if (p->num_nodes() != v || p->num_channels() != d || p->window_len() != t_len) {
            throw std::invalid_argument("forward: control path does not match the model layout");
        }
    }
    const int rows = static_cast<int>(paths.size()) * v;
    const double t_end = static_cast<double>(t_len - 1);

    Tensor x0 = Tensor::zeros({rows, d});
    {
        double* out = x0.raw().data();
        for (const ControlPath* p : paths) {
            p->eval_into(0.0, out);
            out += static_cast<std::size_t>(v) * d;
        }
    }

    // The adjacency depends only on the embedding, so record it once per
    // forward and share the node across every solver stage.
    Tensor adj;
    if (has_spatial(cfg_.variant)) adj = normalized_adaptive_adjacency(params_.embed);

    auto field = [&](double t, const OdeState& s) -> OdeState {
        check_time_domain(t, t_end);
        return to_ode_state(eval_field(stack_control_derivative(paths, t, cfg_),
                                       from_ode_state(s, cfg_.variant), params_, cfg_, adj),
                            cfg_.variant);
    };

    OdeState final_state = integrate(field, to_ode_state(initial_values(x0, params_, cfg_.variant),
                                                         cfg_.variant),
                                     0.0, t_end, solver);
    const AugmentedState end = from_ode_state(final_state, cfg_.variant);
    return output_layer(cfg_.variant == ModelVariant::temporal_only ? end.h : end.z, params_);
}

}  // namespace stgncde
