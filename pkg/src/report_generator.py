import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

from .evaluation import EvalReport, WordRow

UNDEFINED_TEXT = "undefined"

# Published compute for context: (model, parameters, data, training FLOPs)
REFERENCE_COMPUTE = (
    ('BERT-Base', '109M', '16G', '2.79E19'),
    ('BERT-Large', '355M', '16G', '9.07E19'),
    ('RoBERTa-Base', '125M', '160G', '1.54E21'),
    ('RoBERTa-Large', '355M', '160G', '4.36E21'),
    ('ISS (small-scale)', '109M', '0.18G', '1.82E18'),
    ('ISS (medium-scale)', '109M', '0.18G', '4.15E18'),
    ('ISS (large-scale)', '109M', '0.72G', '8.30E18'),
)


@dataclass
class ReportTable:
    header: List[str]
    rows: List[List[str]] = field(default_factory=list)

    def to_text(self) -> str:
        widths = [max(len(cell) for cell in column) for column in zip(self.header, *self.rows)]
        lines = ['  '.join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in [self.header, *self.rows]]
        lines.insert(1, '  '.join('-' * w for w in widths))
        return '\n'.join(lines)


def format_float(value: float, digits: int = 4) -> str:
    if math.isinf(value) and value < 0:
        return UNDEFINED_TEXT
    return f"{value:.{digits}f}"


def format_flops(value: float) -> str:
    return f"{value:.2E}".replace('E+', 'E')


class ReportGenerator:
    """Assembles evaluation results into ordered report sections.

    A report is a dict of section title to content; content is a string, a
    list of strings or a ReportTable. ``metadata`` holds run identifiers and
    never a wall-clock time, so identical runs produce identical reports.
    """

    def __init__(self, title: str = "Influential Subset Selection Report"):
        self.title = title

    def results_table(self, reports: Sequence[EvalReport]) -> ReportTable:
        table = ReportTable(['subset', 'size', 'metric', 'mean', 'std', 'seeds', 'pretrain FLOPs', 'finetune FLOPs'])
        for r in reports:
            table.rows.append([
                r.subset, str(r.subset_size), f"{r.metric}-F1", format_float(r.mean), format_float(r.std),
                str(len(r.values)), format_flops(r.flops), format_flops(r.finetune_flops),
            ])
        return table

    def reference_table(self) -> ReportTable:
        return ReportTable(['model', 'parameters', 'data', 'FLOPs'], [list(row) for row in REFERENCE_COMPUTE])

    def word_table(
        self,
        rows: Sequence[WordRow],
        decode: Callable[[int], str],
        label_name: Callable[[int], str],
    ) -> ReportTable:
        names = list(rows[0].frequencies) if rows else []
        table = ReportTable(['word', 'label', 'PMI', *(f"rel. token freq ({n})" for n in names)])
        for row in rows:
            table.rows.append([
                decode(row.word), label_name(row.label), format_float(row.pmi, 3),
                *(f"{row.frequencies[n]:.3e}" for n in names),
            ])
        return table

    def generate(
        self,
        reports: Sequence[EvalReport],
        metadata: Mapping,
        sweep: Sequence[EvalReport] = (),
        recall: Optional[Mapping[str, Mapping[str, float]]] = None,
    ) -> Dict:
        report: Dict = {}
        if reports:
            best = max(reports, key=lambda r: (r.mean, r.subset))
            report['Summary'] = [
                f"{len(reports)} subsets evaluated under {reports[0].metric}-F1 over "
                f"{len(reports[0].values)} seeds",
                f"best mean: {best.subset} ({format_float(best.mean)} ± {format_float(best.std)})",
            ]
        report['Results'] = self.results_table(reports)
        if sweep:
            report['Subset-size sweep'] = self.results_table(sweep)
        if recall:
            table = ReportTable(['subset', 'size', 'planted recall', 'planted share', 'distractor share'])
            for name in sorted(recall):
                stats = recall[name]
                table.rows.append([name, str(int(stats['size'])), format_float(stats['planted_recall']),
                                   format_float(stats['planted_share']), format_float(stats['distractor_share'])])
            report['Planted recall'] = table
        report['Reference compute'] = self.reference_table()
        report['metadata'] = dict(metadata)
        return report

    def to_text(self, report: Mapping) -> str:
        lines = [self.title, '=' * len(self.title)]
        for key, value in sorted(report.get('metadata', {}).items()):
            lines.append(f"{key}: {value}")
        for section, content in report.items():
            if section == 'metadata':
                continue
            lines += ['', section, '-' * len(section)]
            if isinstance(content, ReportTable):
                lines.append(content.to_text())
            elif isinstance(content, list):
                lines += [f"- {item}" for item in content]
            else:
                lines.append(str(content))
        return '\n'.join(lines) + '\n'


def results_tsv(reports: Sequence[EvalReport]) -> str:
    """One row per (subset, seed, metric)"""
    lines = ['subset\tseed\tmetric\tvalue\tsubset_size\tpretrain_flops\tfinetune_flops']
    for r in reports:
        for seed in sorted(r.values):
            lines.append(f"{r.subset}\t{seed}\t{r.metric}-F1\t{r.values[seed]!r}\t"
                         f"{r.subset_size}\t{r.flops!r}\t{r.finetune_flops!r}")
    return '\n'.join(lines) + '\n'


def words_tsv(table: ReportTable) -> str:
    return '\n'.join('\t'.join(row) for row in [table.header, *table.rows]) + '\n'
