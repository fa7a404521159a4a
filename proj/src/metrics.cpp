#include "reettt/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace reettt {

using nlohmann::ordered_json;

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    hits += o.hits;
    misses += o.misses;
    false_alarms += o.false_alarms;
    correct_negatives += o.correct_negatives;
    total += o.total;
    return *this;
}

ConfusionCounts confusion(std::span<const double> pred, std::span<const double> target, double tau) {
    if (pred.size() != target.size()) throw std::invalid_argument("confusion: field sizes differ");
    ConfusionCounts c;
    c.total = pred.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] >= tau, t = target[i] >= tau;
        if (p && t)
            ++c.hits;
        else if (t)
            ++c.misses;
        else if (p)
            ++c.false_alarms;
        else
            ++c.correct_negatives;
    }
    return c;
}

std::optional<double> pod(const ConfusionCounts& c) {
    const auto d = c.hits + c.misses;
    if (d == 0) return std::nullopt;
    return static_cast<double>(c.hits) / static_cast<double>(d);
}

std::optional<double> far(const ConfusionCounts& c) {
    const auto d = c.hits + c.false_alarms;
    if (d == 0) return std::nullopt;
    return static_cast<double>(c.false_alarms) / static_cast<double>(d);
}

std::optional<double> csi(const ConfusionCounts& c) {
    const auto d = c.hits + c.misses + c.false_alarms;
    if (d == 0) return std::nullopt;
    return static_cast<double>(c.hits) / static_cast<double>(d);
}

std::optional<double> ets(const ConfusionCounts& c) {
    if (c.total == 0) return std::nullopt;
    const double h = static_cast<double>(c.hits), m = static_cast<double>(c.misses),
                 fa = static_cast<double>(c.false_alarms);
    const double r = (h + fa) * (h + m) / static_cast<double>(c.total);
    const double d = h + m + fa - r;
    if (d == 0.0) return std::nullopt;
    return (h - r) / d;
}

double mse(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.empty()) throw std::invalid_argument("mse: field sizes differ");
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
    return s / static_cast<double>(pred.size());
}

double ssim(std::span<const double> pred, std::span<const double> target, std::size_t h, std::size_t w,
            const SsimConfig& cfg) {
    if (pred.size() != h * w || target.size() != h * w) throw std::invalid_argument("ssim: field sizes differ");
    const std::size_t k = cfg.window;
    if (k == 0 || k > h || k > w) throw std::invalid_argument("ssim: window larger than image");
    const double c1 = (0.01 * cfg.data_range) * (0.01 * cfg.data_range);
    const double c2 = (0.03 * cfg.data_range) * (0.03 * cfg.data_range);
    const double n = static_cast<double>(k * k);
    double total = 0;
    for (std::size_t y0 = 0; y0 + k <= h; ++y0)
        for (std::size_t x0 = 0; x0 + k <= w; ++x0) {
            double sa = 0, sb = 0;
            for (std::size_t y = y0; y < y0 + k; ++y)
                for (std::size_t x = x0; x < x0 + k; ++x) {
                    sa += pred[y * w + x];
                    sb += target[y * w + x];
                }
            const double ma = sa / n, mb = sb / n;
            double va = 0, vb = 0, cov = 0;
            for (std::size_t y = y0; y < y0 + k; ++y)
                for (std::size_t x = x0; x < x0 + k; ++x) {
                    const double da = pred[y * w + x] - ma, db = target[y * w + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    return total / static_cast<double>((h - k + 1) * (w - k + 1));
}

SampleMetrics score_sample(std::span<const double> pred, std::span<const double> target, std::size_t steps,
                           std::size_t h, std::size_t w, const std::vector<double>& thresholds,
                           const SsimConfig& ssim_cfg) {
    const std::size_t hw = h * w;
    if (pred.size() != steps * hw || target.size() != steps * hw)
        throw std::invalid_argument("score_sample: prediction and target lengths differ");
    SampleMetrics s;
    s.pixels = hw;
    for (std::size_t t = 0; t < steps; ++t) {
        auto p = pred.subspan(t * hw, hw), y = target.subspan(t * hw, hw);
        s.sse.push_back(mse(p, y) * static_cast<double>(hw));
        s.ssim.push_back(ssim(p, y, h, w, ssim_cfg));
        std::vector<ConfusionCounts> row;
        for (double tau : thresholds) row.push_back(confusion(p, y, tau));
        s.counts.push_back(std::move(row));
    }
    return s;
}

namespace {

void add_to(Aggregate& a, const std::optional<double>& v, double& sum) {
    if (v) {
        ++a.defined;
        sum += *v;
    } else {
        ++a.excluded;
    }
}

void finish(Aggregate& a, double sum) {
    if (a.defined) a.mean = sum / static_cast<double>(a.defined);
}

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::optional<double> opt_from(const ordered_json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

ordered_json agg_json(const Aggregate& a) {
    return {{"mean", opt(a.mean)}, {"defined", a.defined}, {"excluded", a.excluded}};
}

Aggregate agg_from(const ordered_json& j) {
    return {opt_from(j.at("mean")), j.at("defined").get<std::size_t>(), j.at("excluded").get<std::size_t>()};
}

}  // namespace

const ThresholdAggregate& MetricReport::at_threshold(double tau) const {
    for (const auto& a : aggregates)
        if (a.tau == tau) return a;
    throw std::invalid_argument("metric report: no threshold " + std::to_string(tau));
}

MetricReport build_report(const std::vector<SampleMetrics>& samples, const std::vector<double>& thresholds) {
    MetricReport r;
    r.samples = samples.size();
    if (samples.empty()) return r;
    const std::size_t steps = samples[0].sse.size();
    for (const auto& s : samples)
        if (s.sse.size() != steps || s.counts.size() != steps || (steps && s.counts[0].size() != thresholds.size()))
            throw std::invalid_argument("build_report: samples disagree on lead times or thresholds");

    const double n = static_cast<double>(samples.size());
    for (std::size_t t = 0; t < steps; ++t) {
        LeadTimeMetrics lead;
        lead.lead = t;
        double sse = 0, ss = 0;
        std::size_t pixels = 0;
        for (const auto& s : samples) {
            sse += s.sse[t];
            ss += s.ssim[t];
            pixels += s.pixels;
        }
        lead.mse = sse / static_cast<double>(pixels);
        lead.ssim = ss / n;
        for (std::size_t k = 0; k < thresholds.size(); ++k) {
            ThresholdScores ts;
            ts.tau = thresholds[k];
            for (const auto& s : samples) ts.counts += s.counts[t][k];
            ts.pod = pod(ts.counts);
            ts.far = far(ts.counts);
            ts.csi = csi(ts.counts);
            ts.ets = ets(ts.counts);
            lead.thresholds.push_back(ts);
        }
        r.mean_mse += lead.mse / static_cast<double>(steps);
        r.mean_ssim += lead.ssim / static_cast<double>(steps);
        r.leads.push_back(std::move(lead));
    }
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        ThresholdAggregate a;
        a.tau = thresholds[k];
        double sp = 0, sf = 0, sc = 0, se = 0;
        for (const auto& lead : r.leads) {
            const auto& ts = lead.thresholds[k];
            add_to(a.pod, ts.pod, sp);
            add_to(a.far, ts.far, sf);
            add_to(a.csi, ts.csi, sc);
            add_to(a.ets, ts.ets, se);
        }
        finish(a.pod, sp);
        finish(a.far, sf);
        finish(a.csi, sc);
        finish(a.ets, se);
        r.aggregates.push_back(a);
    }
    return r;
}

ordered_json to_json(const MetricReport& r) {
    ordered_json j;
    j["fingerprint"] = r.fingerprint;
    j["mode"] = r.mode;
    j["samples"] = r.samples;
    j["pooling"] = r.pooling;
    j["settings"] = r.settings;
    j["mean_mse"] = r.mean_mse;
    j["mean_ssim"] = r.mean_ssim;
    ordered_json aggs = ordered_json::array();
    for (const auto& a : r.aggregates)
        aggs.push_back({{"tau", a.tau},
                        {"pod", agg_json(a.pod)},
                        {"far", agg_json(a.far)},
                        {"csi", agg_json(a.csi)},
                        {"ets", agg_json(a.ets)}});
    j["aggregates"] = aggs;
    ordered_json leads = ordered_json::array();
    for (const auto& l : r.leads) {
        ordered_json th = ordered_json::array();
        for (const auto& t : l.thresholds)
            th.push_back({{"tau", t.tau},
                          {"hits", t.counts.hits},
                          {"misses", t.counts.misses},
                          {"false_alarms", t.counts.false_alarms},
                          {"correct_negatives", t.counts.correct_negatives},
                          {"total", t.counts.total},
                          {"pod", opt(t.pod)},
                          {"far", opt(t.far)},
                          {"csi", opt(t.csi)},
                          {"ets", opt(t.ets)}});
        leads.push_back({{"lead", l.lead}, {"mse", l.mse}, {"ssim", l.ssim}, {"thresholds", th}});
    }
    j["leads"] = leads;
    return j;
}

MetricReport report_from_json(const ordered_json& j) {
    MetricReport r;
    r.fingerprint = j.at("fingerprint").get<std::uint64_t>();
    r.mode = j.at("mode").get<std::string>();
    r.samples = j.at("samples").get<std::size_t>();
    r.pooling = j.at("pooling").get<std::string>();
    r.settings = j.at("settings");
    r.mean_mse = j.at("mean_mse").get<double>();
    r.mean_ssim = j.at("mean_ssim").get<double>();
    for (const auto& a : j.at("aggregates"))
        r.aggregates.push_back({a.at("tau").get<double>(), agg_from(a.at("pod")), agg_from(a.at("far")),
                                agg_from(a.at("csi")), agg_from(a.at("ets"))});
    for (const auto& l : j.at("leads")) {
        LeadTimeMetrics lead;
        lead.lead = l.at("lead").get<std::size_t>();
        lead.mse = l.at("mse").get<double>();
        lead.ssim = l.at("ssim").get<double>();
        for (const auto& t : l.at("thresholds")) {
            ThresholdScores ts;
            ts.tau = t.at("tau").get<double>();
            ts.counts = {t.at("hits").get<std::uint64_t>(), t.at("misses").get<std::uint64_t>(),
                         t.at("false_alarms").get<std::uint64_t>(), t.at("correct_negatives").get<std::uint64_t>(),
                         t.at("total").get<std::uint64_t>()};
            ts.pod = opt_from(t.at("pod"));
            ts.far = opt_from(t.at("far"));
            ts.csi = opt_from(t.at("csi"));
            ts.ets = opt_from(t.at("ets"));
            lead.thresholds.push_back(ts);
        }
        r.leads.push_back(std::move(lead));
    }
    return r;
}

}  // namespace reettt
