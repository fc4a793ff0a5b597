from nsn.data_io import write_frontier_csv
from nsn.decorators import command_errors
from nsn.experiments import native_frontier, truncation_frontier

from ._base import ExperimentCommand

RECIPES = {
    'native': native_frontier,
    'truncate': truncation_frontier,
}


class Command(ExperimentCommand):
    help = 'Baseline frontiers: one specialist per rank (native) or a truncated max-rank model (truncate).'

    def add_arguments(self, parser):
        parser.add_argument('kind', choices=sorted(RECIPES))

    @command_errors
    def handle(self, *args, **options):
        config = self.setup(options)
        out = self.output_dir(options, config)
        kind = options['kind']
        table = RECIPES[kind](config)
        path = out / f'baseline_{kind}.csv'
        write_frontier_csv(table, path)
        for row in table:
            self.stdout.write(f'  rank {row.rank:>4}  flops {row.flops:>8}  accuracy {row.accuracy:.4f}')
        self.success(f'Wrote {len(table)} rows to {path}')
