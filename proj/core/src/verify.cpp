#include "tcpdiff/verify.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>

#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"

namespace tcpdiff::verify {

ContingencyCounts& ContingencyCounts::operator+=(const ContingencyCounts& o) {
  hits += o.hits;
  false_alarms += o.false_alarms;
  misses += o.misses;
  correct_negatives += o.correct_negatives;
  return *this;
}

template <class T>
ContingencyCounts contingency(const BasicTensor<T>& pred, const BasicTensor<T>& obs, double threshold) {
  if (pred.shape != obs.shape)
    throw ShapeError("contingency: prediction " + shape_str(pred.shape) + " vs observation " + shape_str(obs.shape));
  if (!pred.all_finite() || !obs.all_finite()) throw NumericalError("contingency: non-finite field");
  ContingencyCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = static_cast<double>(pred[i]) >= threshold;
    const bool o = static_cast<double>(obs[i]) >= threshold;
    if (p && o)
      ++c.hits;
    else if (p)
      ++c.false_alarms;
    else if (o)
      ++c.misses;
    else
      ++c.correct_negatives;
  }
  return c;
}

std::string Ets::str() const {
  if (!value) return kNoEvents;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", *value);
  return buf;
}

Ets ets(const ContingencyCounts& c) {
  const double total = static_cast<double>(c.total());
  if (total == 0.0) return {};
  const double a = static_cast<double>(c.hits), b = static_cast<double>(c.false_alarms),
               m = static_cast<double>(c.misses);
  const double r = (a + b) * (a + m) / total;
  const double denom = a + b + m - r;
  if (denom == 0.0) return {};
  return {(a - r) / denom};
}

template <class T>
double tp_mae(const BasicTensor<T>& pred, const BasicTensor<T>& obs) {
  if (pred.shape != obs.shape)
    throw ShapeError("tp_mae: prediction " + shape_str(pred.shape) + " vs observation " + shape_str(obs.shape));
  if (pred.size() == 0) throw ShapeError("tp_mae: empty fields");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(obs[i]));
  return acc / static_cast<double>(pred.size());
}

std::vector<double> default_histogram_edges() {
  std::vector<double> e;
  for (int v = 0; v <= 160; v += 2) e.push_back(v);
  return e;
}

namespace {

void check_edges(const std::vector<double>& edges) {
  if (edges.size() < 2) throw ConfigError("histogram needs at least two bin edges");
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (!(edges[i] < edges[i + 1])) throw ConfigError("histogram edges must be strictly increasing");
}

}  // namespace

template <class T>
std::vector<std::uint64_t> frequency_histogram(const std::vector<BasicTensor<T>>& fields,
                                               const std::vector<double>& edges) {
  check_edges(edges);
  std::vector<std::uint64_t> counts(edges.size() - 1, 0);
  for (const auto& f : fields)
    for (T v : f.data) {
      const double x = static_cast<double>(v);
      if (!(x >= edges.front() && x < edges.back())) continue;
      const auto it = std::upper_bound(edges.begin(), edges.end(), x);
      ++counts[static_cast<std::size_t>(it - edges.begin()) - 1];
    }
  return counts;
}

namespace {
std::mutex fftw_planner;
}

std::vector<double> power_spectrum(const std::vector<double>& field, std::size_t height, std::size_t width) {
  if (field.size() != height * width) throw ShapeError("power_spectrum: field size does not match dimensions");
  const std::size_t n = height * width;
  auto* in = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  auto* out = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (!in || !out) {
    fftw_free(in);
    fftw_free(out);
    throw std::bad_alloc();
  }
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner);
    plan = fftw_plan_dft_2d(static_cast<int>(height), static_cast<int>(width), in, out, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    in[i][0] = field[i];
    in[i][1] = 0.0;
  }
  fftw_execute(plan);
  std::vector<double> power(n);
  for (std::size_t i = 0; i < n; ++i) power[i] = out[i][0] * out[i][0] + out[i][1] * out[i][1];
  {
    std::lock_guard lock(fftw_planner);
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return power;
}

template <class T>
SpectrumCurve rapsd(const BasicTensor<T>& field) {
  if (field.rank() != 2 || field.dim(0) != field.dim(1))
    throw ShapeError("rapsd needs a square [H, W] field, got " + shape_str(field.shape));
  const std::size_t h = field.dim(0), half = h / 2;
  std::vector<double> f(field.data.begin(), field.data.end());
  const auto power = power_spectrum(f, h, h);
  SpectrumCurve out;
  out.power.assign(half, 0.0);
  out.count.assign(half, 0);
  for (std::size_t k = 1; k <= half; ++k) out.wavenumber.push_back(static_cast<double>(k));
  auto signed_freq = [h](std::size_t u) {
    return u <= h / 2 ? static_cast<double>(u) : static_cast<double>(u) - static_cast<double>(h);
  };
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < h; ++v) {
      const double ku = signed_freq(u), kv = signed_freq(v);
      const auto k = static_cast<std::size_t>(std::llround(std::sqrt(ku * ku + kv * kv)));
      if (k < 1 || k > half) continue;
      out.power[k - 1] += power[u * h + v];
      ++out.count[k - 1];
    }
  for (std::size_t k = 0; k < half; ++k)
    if (out.count[k]) out.power[k] /= static_cast<double>(out.count[k]);
  return out;
}

Tensor aggregate_pairs(const Tensor& seq) {
  if (seq.rank() != 3) throw ShapeError("aggregate_pairs needs [m, H, W]");
  const std::size_t pairs = seq.dim(0) / 2, plane = seq.dim(1) * seq.dim(2);
  if (pairs == 0) throw ShapeError("6-hour aggregation needs at least two 3-hour frames");
  Tensor out({pairs, seq.dim(1), seq.dim(2)});
  for (std::size_t p = 0; p < pairs; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      out[p * plane + i] = seq[(2 * p) * plane + i] + seq[(2 * p + 1) * plane + i];
  return out;
}

// ---- evaluation ------------------------------------------------------------------

namespace {

Tensor frame(const Tensor& seq, std::size_t t) {
  const std::size_t plane = seq.dim(1) * seq.dim(2);
  return Tensor({seq.dim(1), seq.dim(2)}, std::vector<float>(seq.data.begin() + static_cast<std::ptrdiff_t>(t * plane),
                                                             seq.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * plane)));
}

struct Accum {
  std::vector<ContingencyCounts> counts;  // per threshold
  double abs_sum = 0.0;
  std::size_t cells = 0;
};

// Accumulators for one member over a sample subset: index 0 pools all leads, 1+t lead t.
std::vector<Accum> score(const std::vector<Tensor>& pred, const std::vector<Tensor>& obs,
                         const std::vector<std::size_t>& subset, const std::vector<double>& thresholds) {
  const std::size_t leads = obs.front().dim(0);
  std::vector<Accum> acc(leads + 1);
  for (auto& a : acc) a.counts.assign(thresholds.size(), {});
  for (std::size_t k : subset) {
    const std::size_t plane = obs[k].dim(1) * obs[k].dim(2);
    for (std::size_t t = 0; t < leads; ++t) {
      const Tensor p = frame(pred[k], t), o = frame(obs[k], t);
      double abs_sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) abs_sum += std::abs(static_cast<double>(p[i]) - static_cast<double>(o[i]));
      for (std::size_t j = 0; j < thresholds.size(); ++j) {
        const auto c = contingency(p, o, thresholds[j]);
        acc[0].counts[j] += c;
        acc[1 + t].counts[j] += c;
      }
      for (std::size_t a : {std::size_t{0}, 1 + t}) {
        acc[a].abs_sum += abs_sum;
        acc[a].cells += plane;
      }
    }
  }
  return acc;
}

void add_rows(std::vector<MetricRow>& rows, const std::vector<std::vector<Accum>>& per_member,
              const std::vector<int>& leads, const std::vector<double>& thresholds, const std::string& group) {
  const std::size_t members = per_member.size();
  auto emit = [&](const std::string& metric, double thr, int lead, const std::vector<std::optional<double>>& vals) {
    for (std::size_t i = 0; i < members; ++i) rows.push_back({metric, thr, lead, std::to_string(i), vals[i], group});
    std::vector<double> defined;
    for (const auto& v : vals)
      if (v) defined.push_back(*v);
    std::optional<double> mean, sd;
    if (!defined.empty()) {
      double s = 0.0;
      for (double v : defined) s += v;
      mean = s / static_cast<double>(defined.size());
      double q = 0.0;
      for (double v : defined) q += (v - *mean) * (v - *mean);
      sd = std::sqrt(q / static_cast<double>(defined.size()));
    }
    rows.push_back({metric, thr, lead, "mean", mean, group});
    rows.push_back({metric, thr, lead, "std", sd, group});
  };
  for (std::size_t a = 0; a <= leads.size(); ++a) {
    const int lead = a == 0 ? 0 : leads[a - 1];
    for (std::size_t j = 0; j < thresholds.size(); ++j) {
      std::vector<std::optional<double>> vals;
      for (const auto& pm : per_member) vals.push_back(ets(pm[a].counts[j]).value);
      emit("ETS", thresholds[j], lead, vals);
    }
    std::vector<std::optional<double>> vals;
    for (const auto& pm : per_member) vals.push_back(pm[a].abs_sum / static_cast<double>(pm[a].cells));
    emit("TP_MAE", 0.0, lead, vals);
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

Report evaluate(const std::vector<std::vector<Tensor>>& members_in, const std::vector<Tensor>& obs_in,
                const std::vector<int>& lead_hours, const EvalOptions& options,
                const std::vector<std::map<std::string, std::string>>& tags) {
  if (members_in.empty()) throw ShapeError("evaluate: no forecast members");
  if (obs_in.empty()) throw ShapeError("evaluate: no observations");
  check_edges(options.histogram_edges);
  for (std::size_t i = 0; i < members_in.size(); ++i) {
    if (members_in[i].size() != obs_in.size())
      throw ShapeError("evaluate: member " + std::to_string(i) + " has " + std::to_string(members_in[i].size()) +
                       " forecasts for " + std::to_string(obs_in.size()) + " observations");
    for (std::size_t k = 0; k < obs_in.size(); ++k)
      if (members_in[i][k].shape != obs_in[k].shape || obs_in[k].rank() != 3)
        throw ShapeError("evaluate: member " + std::to_string(i) + " sample " + std::to_string(k) + " has shape " +
                         shape_str(members_in[i][k].shape) + ", observation " + shape_str(obs_in[k].shape));
  }
  if (obs_in.front().dim(0) != lead_hours.size()) throw ShapeError("evaluate: lead-time list does not match frames");

  std::vector<std::vector<Tensor>> members = members_in;
  std::vector<Tensor> obs = obs_in;
  std::vector<int> leads = lead_hours;
  if (options.aggregate_6h) {
    for (auto& m : members)
      for (auto& t : m) t = aggregate_pairs(t);
    for (auto& t : obs) t = aggregate_pairs(t);
    leads.clear();
    for (std::size_t p = 0; p < obs.front().dim(0); ++p) leads.push_back(lead_hours[2 * p + 1]);
  }

  Report rep;
  rep.lead_hours = leads;
  rep.histogram_edges = options.histogram_edges;

  std::vector<std::size_t> all(obs.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  {
    std::vector<std::vector<Accum>> per_member;
    for (const auto& m : members) per_member.push_back(score(m, obs, all, options.thresholds));
    add_rows(rep.metrics, per_member, leads, options.thresholds, "");
  }
  if (!options.group_by.empty()) {
    if (tags.size() != obs.size()) throw ShapeError("evaluate: group-by needs one tag set per sample");
    std::set<std::string> values;
    for (const auto& t : tags) {
      const auto it = t.find(options.group_by);
      values.insert(it == t.end() ? std::string("(none)") : it->second);
    }
    for (const auto& v : values) {
      std::vector<std::size_t> subset;
      for (std::size_t k = 0; k < obs.size(); ++k) {
        const auto it = tags[k].find(options.group_by);
        if ((it == tags[k].end() ? std::string("(none)") : it->second) == v) subset.push_back(k);
      }
      std::vector<std::vector<Accum>> per_member;
      for (const auto& m : members) per_member.push_back(score(m, obs, subset, options.thresholds));
      add_rows(rep.metrics, per_member, leads, options.thresholds, options.group_by + "=" + v);
    }
  }

  rep.histograms.push_back({"observed", frequency_histogram(obs, options.histogram_edges)});
  for (std::size_t i = 0; i < members.size(); ++i)
    rep.histograms.push_back({"member_" + std::to_string(i), frequency_histogram(members[i], options.histogram_edges)});

  const bool square = obs.front().dim(1) == obs.front().dim(2);
  if (square) {
    auto spectra = [&](const std::string& name, const std::vector<Tensor>& seqs) {
      for (std::size_t t = 0; t < leads.size(); ++t) {
        SpectrumRow row{name, leads[t], {}};
        for (const auto& s : seqs) {
          const auto c = rapsd(frame(s, t));
          if (row.curve.power.empty()) {
            row.curve = c;
          } else {
            for (std::size_t b = 0; b < c.power.size(); ++b) row.curve.power[b] += c.power[b];
          }
        }
        for (double& p : row.curve.power) p /= static_cast<double>(seqs.size());
        rep.spectra.push_back(std::move(row));
      }
    };
    spectra("observed", obs);
    for (std::size_t i = 0; i < members.size(); ++i) spectra("member_" + std::to_string(i), members[i]);
  }
  return rep;
}

std::optional<double> Report::value(const std::string& metric, double threshold, const std::string& member,
                                    int lead_time) const {
  for (const auto& r : metrics)
    if (r.group.empty() && r.metric == metric && r.threshold == threshold && r.member == member &&
        r.lead_time == lead_time)
      return r.value;
  throw RangeError("report has no row " + metric + "/" + fmt(threshold) + "/" + member);
}

void Report::write(const fs::path& dir) const {
  io::ensure_writable_dir(dir);
  auto row_text = [](const MetricRow& r) {
    std::string s = r.metric + "," + (r.metric == "TP_MAE" ? std::string() : fmt(r.threshold)) + "," +
                    (r.lead_time == 0 ? std::string("all") : std::to_string(r.lead_time)) + "," + r.member + "," +
                    (r.value ? fmt(*r.value) : std::string(kNoEvents));
    return s;
  };
  std::string metrics_csv = "metric,threshold,lead_time,member,value\n";
  std::string grouped_csv = "group,metric,threshold,lead_time,member,value\n";
  bool any_group = false;
  for (const auto& r : metrics) {
    if (r.group.empty()) {
      metrics_csv += row_text(r) + "\n";
    } else {
      grouped_csv += r.group + "," + row_text(r) + "\n";
      any_group = true;
    }
  }
  io::write_text(dir / "metrics.csv", metrics_csv);
  if (any_group) io::write_text(dir / "metrics_by_group.csv", grouped_csv);

  std::string hist = "# edges_mm_per_3hr:";
  for (std::size_t i = 0; i < histogram_edges.size(); ++i) hist += (i ? "," : " ") + fmt(histogram_edges[i]);
  hist += "\nsource,bin_lower,bin_upper,count\n";
  for (const auto& h : histograms)
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      hist += h.source + "," + fmt(histogram_edges[b]) + "," + fmt(histogram_edges[b + 1]) + "," +
              std::to_string(h.counts[b]) + "\n";
  io::write_text(dir / "histogram.csv", hist);

  std::string spec = "source,lead_time,wavenumber,power,count\n";
  for (const auto& s : spectra)
    for (std::size_t b = 0; b < s.curve.power.size(); ++b)
      spec += s.source + "," + std::to_string(s.lead_time) + "," + fmt(s.curve.wavenumber[b]) + "," +
              fmt(s.curve.power[b]) + "," + std::to_string(s.curve.count[b]) + "\n";
  io::write_text(dir / "rapsd.csv", spec);
}

template ContingencyCounts contingency<float>(const Tensor&, const Tensor&, double);
template ContingencyCounts contingency<double>(const BasicTensor<double>&, const BasicTensor<double>&, double);
template double tp_mae<float>(const Tensor&, const Tensor&);
template double tp_mae<double>(const BasicTensor<double>&, const BasicTensor<double>&);
template std::vector<std::uint64_t> frequency_histogram<float>(const std::vector<Tensor>&, const std::vector<double>&);
template std::vector<std::uint64_t> frequency_histogram<double>(const std::vector<BasicTensor<double>>&,
                                                                const std::vector<double>&);
template SpectrumCurve rapsd<float>(const Tensor&);
template SpectrumCurve rapsd<double>(const BasicTensor<double>&);

}  // namespace tcpdiff::verify
