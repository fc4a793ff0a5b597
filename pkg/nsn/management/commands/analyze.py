from dataclasses import replace
from pathlib import Path

from nsn.analysis import (
    bound_fuzz,
    containment_grid,
    convergence_similarity,
    energy_decay_audit,
    frontier_sweep,
    interpolation_bound_report,
    interpolation_gap,
    lemma_fuzz,
    probe_layer,
    similarity_curve,
)
from nsn.data_io import Dataset, load_checkpoint, write_csv, write_frontier_csv, write_grid_csv, write_records_jsonl
from nsn.decorators import command_errors
from nsn.exceptions import AnalysisError
from nsn.experiments import build_datasets
from nsn.layers import FULL, NsnLayer
from nsn.linalg import seeded_rng

from ._base import ExperimentCommand, parse_int_list

ANALYSES = ('containment', 'energy', 'lemma', 'bound', 'similarity', 'frontier')


class Command(ExperimentCommand):
    help = 'Run one diagnostic over a checkpoint and write its data files.'

    def add_arguments(self, parser):
        parser.add_argument('checkpoint')
        parser.add_argument('which', choices=ANALYSES)
        parser.add_argument('--ranks', type=parse_int_list, help='Comma-separated ranks.')
        parser.add_argument('--layers', type=parse_int_list, help='Comma-separated layer indices.')
        parser.add_argument('--samples', type=int, help='Lemma fuzz samples.')
        parser.add_argument('--pairs', type=int, help='Bound fuzz pairs.')
        parser.add_argument('--r1', type=int)
        parser.add_argument('--r-int', type=int, dest='r_int')
        parser.add_argument('--lipschitz', type=float)
        parser.add_argument('--probe', action='store_true', default=None,
                            help='Bound the output layer of a deep model on full-rank features.')
        parser.add_argument('--reference', help='Reference checkpoint for the convergence comparison.')

    def option(self, options, config, name):
        value = options.get(name)
        return config.analysis.get(name) if value is None else value

    @command_errors
    def handle(self, *args, **options):
        config = self.setup(options)
        out = self.output_dir(options, config)
        checkpoint = load_checkpoint(options['checkpoint'])
        if options.get('seed') is None and 'seed' in checkpoint.meta:
            # Rebuild the synthetic data the checkpoint was trained on.
            config = replace(config, seed=int(checkpoint.meta['seed']))
        self.model = checkpoint.model
        self.checkpoint = checkpoint
        self.config = config
        self.options = options
        self.out = out
        written = getattr(self, f'run_{options["which"]}')()
        self.success(f'{options["which"]}: wrote {", ".join(str(p) for p in written)}')

    def nsn_layers(self):
        indices = self.option(self.options, self.config, 'layers') or self.model.nsn_indices()
        layers = []
        for i in indices:
            if not 0 <= i < len(self.model.layers) or not isinstance(self.model.layers[i], NsnLayer):
                raise AnalysisError(f'layer {i} is not an NSN layer of this checkpoint')
            layers.append((i, self.model.layers[i]))
        if not layers:
            raise AnalysisError('the checkpoint has no NSN layers')
        return layers

    def ranks(self):
        return sorted(set(self.option(self.options, self.config, 'ranks')))

    def run_containment(self):
        written = []
        for i, layer in self.nsn_layers():
            limit = min(layer.max_rank, layer.d_in, layer.d_out)
            ranks = [r for r in self.ranks() if r <= limit]
            grid = containment_grid(layer, ranks)
            path = self.out / f'containment_{i}.csv'
            write_grid_csv(grid, path)
            self.stdout.write(f'  layer {i}: min upper-triangle score {grid.upper_triangle().min():.12f}')
            written.append(path)
        return written

    def run_energy(self):
        records = []
        for i, layer in self.nsn_layers():
            audit = energy_decay_audit(layer)
            records.append({'layer': i, **audit.to_dict()})
            self.stdout.write(f'  layer {i}: {audit.violation_count} energy-decay violations')
        path = self.out / 'energy.jsonl'
        write_records_jsonl(records, path)
        return [path]

    def run_lemma(self):
        samples = self.option(self.options, self.config, 'samples') or self.config.analysis['lemma_samples']
        report = lemma_fuzz([layer for _, layer in self.nsn_layers()], seeded_rng(self.config.seed), samples)
        self.stdout.write(f'  {report.violations} violations in {report.samples} samples')
        path = self.out / 'lemma.jsonl'
        write_records_jsonl([report.to_dict()], path)
        return [path]

    def run_bound(self):
        _, test_set = build_datasets(self.config)
        probe = bool(self.option(self.options, self.config, 'probe'))
        lipschitz = self.option(self.options, self.config, 'lipschitz')
        pairs = self.option(self.options, self.config, 'pairs') or self.config.analysis['bound_pairs']
        layer, inputs = probe_layer(self.model, test_set.features, probe)
        probe_set = Dataset(inputs, test_set.labels, test_set.num_classes, 'test')

        records = []
        r1, r_int = self.option(self.options, self.config, 'r1'), self.option(self.options, self.config, 'r_int')
        if r1 is not None and r_int is not None:
            report = interpolation_bound_report(self.model, test_set, r1, r_int, lipschitz, probe=probe)
            records.append({'kind': 'report', **report.to_dict()})
            if len(self.model.blocks) > 1:
                records.append({'kind': 'model_gap', 'r1': r1, 'r_int': r_int,
                                'gap': interpolation_gap(self.model, test_set, r1, r_int)})
        fuzz = bound_fuzz(layer, probe_set, seeded_rng(self.config.seed), pairs, lipschitz)
        records.append({'kind': 'fuzz', **fuzz.to_dict()})
        self.stdout.write(f'  bound dominates the gap on {fuzz.dominated}/{fuzz.pairs} pairs')
        path = self.out / 'bound.jsonl'
        write_records_jsonl(records, path)
        return [path]

    def run_similarity(self):
        limit = self.model.max_rank
        ranks = [r for r in self.ranks() if not limit or r <= limit]
        curve = similarity_curve(self.model, ranks)
        path = self.out / 'similarity.csv'
        write_csv(path, ['rank', 'similarity', 'layers', 'excluded'], (
            (s.rank, s.similarity, ' '.join(map(str, s.layers)), ' '.join(map(str, s.excluded))) for s in curve
        ))
        written = [path]

        reference = self.option(self.options, self.config, 'reference')
        if reference:
            other = load_checkpoint(Path(reference)).model
            groups = self.config.analysis.get('depth_groups')
            rows = []
            for r in ranks + [FULL]:
                for group in convergence_similarity(self.model, other, r, groups):
                    rows.append(('full' if r is FULL else r, group.start, group.stop, group.similarity))
            path = self.out / 'convergence.csv'
            write_csv(path, ['rank', 'start', 'stop', 'similarity'], rows)
            written.append(path)
        return written

    def run_frontier(self):
        _, test_set = build_datasets(self.config)
        limit = self.model.max_rank
        ranks = [r for r in self.ranks() if not limit or r <= limit]
        table = frontier_sweep(self.model, test_set, ranks, self.checkpoint.uncertainty)
        path = self.out / 'frontier.csv'
        write_frontier_csv(table, path)
        for row in table:
            self.stdout.write(f'  rank {row.rank:>4}  flops {row.flops:>8}  accuracy {row.accuracy:.4f}')
        return [path]
