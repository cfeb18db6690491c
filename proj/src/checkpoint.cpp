#include "optrisk/dynamics.hpp"

#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"

#include <json.hpp>

#include <sstream>

namespace optrisk {

using nlohmann::json;

namespace {

constexpr int checkpoint_version = 1;

json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        rows.push_back(to_json(Eigen::VectorXd(m.row(i).transpose())));
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Eigen::MatrixXd matrix_from(const json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    Eigen::MatrixXd m(rows, cols);
    const auto& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows) {
        throw DomainError("checkpoint: matrix row count mismatch");
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
        Eigen::VectorXd r = vector_from(data[static_cast<std::size_t>(i)]);
        if (r.size() != cols) {
            throw DomainError("checkpoint: matrix column count mismatch");
        }
        m.row(i) = r.transpose();
    }
    return m;
}

json to_json(const Mlp& net) {
    json layers = json::array();
    for (const auto& layer : net.layers()) {
        layers.push_back({{"weight", to_json(layer.weight)}, {"bias", to_json(layer.bias)}, {"mask", to_json(layer.mask)}});
    }
    return {{"sizes", net.sizes()}, {"layers", layers}};
}

Mlp mlp_from(const json& j) {
    std::mt19937_64 rng(0);
    Mlp net(j.at("sizes").get<std::vector<int>>(), rng);
    const auto& layers = j.at("layers");
    if (layers.size() != net.layers().size()) {
        throw DomainError("checkpoint: layer count mismatch");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& layer = net.layers()[l];
        Eigen::MatrixXd w = matrix_from(layers[l].at("weight"));
        Eigen::MatrixXd mask = matrix_from(layers[l].at("mask"));
        Eigen::VectorXd b = vector_from(layers[l].at("bias"));
        if (w.rows() != layer.weight.rows() || w.cols() != layer.weight.cols() || mask.rows() != w.rows() ||
            mask.cols() != w.cols() || b.size() != layer.bias.size()) {
            throw DomainError("checkpoint: layer shape mismatch");
        }
        layer.weight = w;
        layer.mask = mask;
        layer.bias = b;
    }
    return net;
}

json to_json(const TrainingHistory& h) {
    return {{"train_loss", h.train_loss},
            {"validation_loss", h.validation_loss},
            {"prune_epoch", h.prune_epoch},
            {"train_samples", h.train_samples},
            {"validation_samples", h.validation_samples},
            {"dropped_samples", h.dropped_samples}};
}

TrainingHistory history_from(const json& j) {
    TrainingHistory h;
    h.train_loss = j.at("train_loss").get<std::vector<double>>();
    h.validation_loss = j.at("validation_loss").get<std::vector<double>>();
    h.prune_epoch = j.at("prune_epoch").get<int>();
    h.train_samples = j.at("train_samples").get<std::size_t>();
    h.validation_samples = j.at("validation_samples").get<std::size_t>();
    h.dropped_samples = j.at("dropped_samples").get<std::size_t>();
    return h;
}

json to_json(const InputScaling& s) { return {{"shift", to_json(s.shift)}, {"scale", to_json(s.scale)}}; }

InputScaling scaling_from(const json& j) { return {vector_from(j.at("shift")), vector_from(j.at("scale"))}; }

}  // namespace

std::string constraint_hash(const FactorConstraintSystem& constraints) {
    std::ostringstream out;
    out << constraints.A.rows() << ',' << constraints.A.cols() << '\n';
    for (Eigen::Index i = 0; i < constraints.A.rows(); ++i) {
        for (Eigen::Index j = 0; j < constraints.A.cols(); ++j) {
            out << format_double(constraints.A(i, j)) << ',';
        }
        out << format_double(constraints.b(i)) << '\n';
    }
    return sha256_hex(out.str());
}

std::string model_set_to_json(const ModelSet& models) {
    const auto& f = models.factors;
    const auto& bounds = f.boundary.constraints();
    json factors = {{"drift_net", to_json(f.drift_net)},
                    {"diffusion_net", to_json(f.diffusion_net)},
                    {"input", to_json(f.input)},
                    {"drift_bias", to_json(f.drift_bias)},
                    {"drift_scale", to_json(f.drift_scale)},
                    {"diffusion_scale", to_json(f.diffusion_scale)},
                    {"joint", f.joint},
                    {"constraints",
                     {{"A", to_json(bounds.A)}, {"b", to_json(bounds.b)}, {"redundancy_removed", bounds.redundancy_removed}}},
                    {"damping_length", f.boundary.damping_length()}};
    json index = {{"drift", models.index.drift},
                  {"vol_net", to_json(models.index.vol_net)},
                  {"input", to_json(models.index.input)},
                  {"log_vol_bias", models.index.log_vol_bias}};
    json secondary = json::array();
    for (const auto& ou : models.secondary) {
        secondary.push_back({{"reversion", ou.reversion}, {"level", ou.level}, {"vol", ou.vol}});
    }
    json root = {{"version", checkpoint_version},
                 {"dt", models.dt},
                 {"constraint_hash", constraint_hash(bounds)},
                 {"factors", factors},
                 {"index", index},
                 {"secondary", secondary},
                 {"residuals",
                  {{"labels", models.residuals.labels},
                   {"dates", models.residuals.dates},
                   {"rows", to_json(models.residuals.rows)}}},
                 {"factor_history", to_json(models.factor_history)},
                 {"index_history", to_json(models.index_history)}};
    return root.dump(1);
}

ModelSet model_set_from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw DomainError(std::string("checkpoint: ") + e.what());
    }
    try {
        if (!root.contains("version") || root.at("version").get<int>() != checkpoint_version) {
            throw DomainError("checkpoint: missing or unsupported version");
        }
        ModelSet m;
        m.dt = root.at("dt").get<double>();
        const auto& f = root.at("factors");
        FactorConstraintSystem bounds;
        bounds.A = matrix_from(f.at("constraints").at("A"));
        bounds.b = vector_from(f.at("constraints").at("b"));
        bounds.redundancy_removed = f.at("constraints").at("redundancy_removed").get<bool>();
        m.constraint_hash = root.at("constraint_hash").get<std::string>();
        if (constraint_hash(bounds) != m.constraint_hash) {
            throw DomainError("checkpoint: constraint hash mismatch");
        }
        m.factors.boundary = BoundaryTransform(bounds, f.at("damping_length").get<double>());
        m.factors.drift_net = mlp_from(f.at("drift_net"));
        m.factors.diffusion_net = mlp_from(f.at("diffusion_net"));
        m.factors.input = scaling_from(f.at("input"));
        m.factors.drift_bias = vector_from(f.at("drift_bias"));
        m.factors.drift_scale = vector_from(f.at("drift_scale"));
        m.factors.diffusion_scale = vector_from(f.at("diffusion_scale"));
        m.factors.joint = f.at("joint").get<bool>();
        const auto& ix = root.at("index");
        m.index.drift = ix.at("drift").get<std::map<std::string, double>>();
        m.index.vol_net = mlp_from(ix.at("vol_net"));
        m.index.input = scaling_from(ix.at("input"));
        m.index.log_vol_bias = ix.at("log_vol_bias").get<double>();
        for (const auto& ou : root.at("secondary")) {
            m.secondary.push_back({ou.at("reversion").get<double>(), ou.at("level").get<double>(), ou.at("vol").get<double>()});
        }
        const auto& res = root.at("residuals");
        m.residuals.labels = res.at("labels").get<std::vector<std::string>>();
        m.residuals.dates = res.at("dates").get<std::vector<std::string>>();
        m.residuals.rows = matrix_from(res.at("rows"));
        m.factor_history = history_from(root.at("factor_history"));
        m.index_history = history_from(root.at("index_history"));
        return m;
    } catch (const json::exception& e) {
        throw DomainError(std::string("checkpoint: ") + e.what());
    }
}

}  // namespace optrisk
